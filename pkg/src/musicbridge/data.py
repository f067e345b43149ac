"""Domain records, dataset files, splits, and run configuration.

Datasets are UTF-8 JSON Lines: one self-describing record per line. QA records
require ``clip_id, question, answer, version, split`` and may carry
``provenance`` and ``filter_flags``. Config files are flat ``key = value``
documents whose keys are the dotted field names of :class:`RunConfig`.
"""

from __future__ import annotations

import dataclasses
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .serialization import canonical_json, digest_text

VERSIONS = ("short", "long")
SPLITS = ("train", "test")

# Characters accepted as a terminal for an answer (see datagen hygiene filter).
TERMINAL_PUNCTUATION = (".", "!", "?", '"', "'", ")", "]")


class DatasetError(ValueError):
    """A dataset or config file violated the documented format."""


class ConfigError(DatasetError):
    """A config document contained an unknown key or a bad value."""


def has_terminal_punctuation(text: str) -> bool:
    stripped = text.rstrip()
    return bool(stripped) and stripped.endswith(TERMINAL_PUNCTUATION)


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------

@dataclass
class MusicClip:
    """One audio sample: either a raw mono waveform or precomputed frame features."""

    id: str
    source_ref: str = ""
    duration_s: float = 0.0
    sample_rate: int = 16000
    waveform: list[float] | None = None
    features: list[list[float]] | None = None

    def __post_init__(self):
        if not self.id:
            raise ValueError("clip id must be non-empty")
        if self.waveform is None and self.features is None:
            raise ValueError(f"clip {self.id!r}: needs a waveform or frame features")
        if self.waveform is not None:
            expected = round(self.duration_s * self.sample_rate)
            if expected <= 0 or len(self.waveform) != expected:
                raise ValueError(
                    f"clip {self.id!r}: waveform length {len(self.waveform)} != "
                    f"round(duration_s * sample_rate) = {expected} > 0"
                )
        if self.features is not None:
            if not self.features:
                raise ValueError(f"clip {self.id!r}: empty feature matrix")
            width = len(self.features[0])
            if width == 0 or any(len(row) != width for row in self.features):
                raise ValueError(f"clip {self.id!r}: feature rows must be non-empty and rectangular")


@dataclass
class CaptionRecord:
    clip_id: str
    caption: str
    field_name: str = "caption_writing"

    def __post_init__(self):
        if not self.clip_id:
            raise ValueError("caption record needs a clip_id")
        if not self.caption:
            raise ValueError(f"caption for clip {self.clip_id!r} is empty")


@dataclass
class Provenance:
    generator_model: str = ""
    prompt_hash: str = ""


@dataclass
class QAPair:
    """One instruction/answer record.

    Construction only checks the structural fields (version/split values);
    content requirements (non-empty text, terminal punctuation on the answer)
    are the business of the generation filters and are enforced again at the
    dataset-file boundary by :func:`validate_qa`.
    """

    clip_id: str
    question: str
    answer: str
    version: str = "short"
    split: str = "train"
    provenance: Provenance | None = None
    filter_flags: set[str] = field(default_factory=set)

    def __post_init__(self):
        if self.version not in VERSIONS:
            raise ValueError(f"unknown version {self.version!r}, expected one of {VERSIONS}")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}, expected one of {SPLITS}")


def validate_qa(pair: QAPair) -> None:
    """Raise if the pair violates the dataset invariants."""
    if not pair.clip_id:
        raise ValueError("qa record needs a clip_id")
    if not pair.question.strip():
        raise ValueError(f"qa record for clip {pair.clip_id!r} has an empty question")
    if not pair.answer.strip():
        raise ValueError(f"qa record for clip {pair.clip_id!r} has an empty answer")
    if not has_terminal_punctuation(pair.answer):
        raise ValueError(
            f"qa record for clip {pair.clip_id!r}: answer lacks terminal punctuation"
        )


# ---------------------------------------------------------------------------
# Dataset files
# ---------------------------------------------------------------------------

_QA_REQUIRED = ("clip_id", "question", "answer", "version", "split")
_CAPTION_REQUIRED = ("clip_id", "caption")


def _qa_to_json(pair: QAPair) -> dict:
    rec = {
        "clip_id": pair.clip_id,
        "question": pair.question,
        "answer": pair.answer,
        "version": pair.version,
        "split": pair.split,
    }
    if pair.provenance is not None:
        rec["provenance"] = {
            "generator_model": pair.provenance.generator_model,
            "prompt_hash": pair.provenance.prompt_hash,
        }
    if pair.filter_flags:
        rec["filter_flags"] = sorted(pair.filter_flags)
    return rec


def _qa_from_json(rec: dict) -> QAPair:
    for key in _QA_REQUIRED:
        if key not in rec:
            raise ValueError(f"missing key {key!r}")
    prov = None
    if "provenance" in rec:
        prov = Provenance(
            generator_model=rec["provenance"].get("generator_model", ""),
            prompt_hash=rec["provenance"].get("prompt_hash", ""),
        )
    pair = QAPair(
        clip_id=rec["clip_id"],
        question=rec["question"],
        answer=rec["answer"],
        version=rec["version"],
        split=rec["split"],
        provenance=prov,
        filter_flags=set(rec.get("filter_flags", [])),
    )
    validate_qa(pair)
    return pair


def _caption_from_json(rec: dict) -> CaptionRecord:
    for key in _CAPTION_REQUIRED:
        if key not in rec:
            raise ValueError(f"missing key {key!r}")
    return CaptionRecord(
        clip_id=rec["clip_id"],
        caption=rec["caption"],
        field_name=rec.get("field_name", "caption_writing"),
    )


def load_dataset(path: str | Path, kind: str) -> list:
    """Load a captions or qa JSONL file, rejecting invalid records with line numbers."""
    if kind not in ("captions", "qa"):
        raise ValueError(f"unknown dataset kind {kind!r}")
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"{path}: no such file")
    records = []
    seen: set = set()
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}: line {lineno}: malformed record ({exc.msg})") from exc
            if not isinstance(rec, dict):
                raise DatasetError(f"{path}: line {lineno}: record is not an object")
            try:
                if kind == "qa":
                    item = _qa_from_json(rec)
                    key = (item.clip_id, item.version, item.question)
                else:
                    item = _caption_from_json(rec)
                    key = (item.clip_id, item.field_name)
            except ValueError as exc:
                raise DatasetError(f"{path}: line {lineno}: {exc}") from exc
            if key in seen:
                raise DatasetError(f"{path}: line {lineno}: duplicate record id {key!r}")
            seen.add(key)
            records.append(item)
    return records


def save_dataset(records: list, path: str | Path) -> None:
    """Write records as JSON Lines, preserving input order."""
    path = Path(path)
    lines = []
    for rec in records:
        if isinstance(rec, QAPair):
            validate_qa(rec)
            lines.append(canonical_json(_qa_to_json(rec)))
        elif isinstance(rec, CaptionRecord):
            lines.append(canonical_json({
                "clip_id": rec.clip_id,
                "caption": rec.caption,
                "field_name": rec.field_name,
            }))
        else:
            raise TypeError(f"cannot save record of type {type(rec).__name__}")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def partition(records: list[QAPair], selector: str) -> list[QAPair]:
    """Select the short, long, or full (mixed) subset, preserving order."""
    if selector == "mixed":
        return list(records)
    if selector not in VERSIONS:
        raise ValueError(f"unknown partition selector {selector!r}")
    return [r for r in records if r.version == selector]


# ---------------------------------------------------------------------------
# Clip files
# ---------------------------------------------------------------------------

def load_clips(path: str | Path) -> list[MusicClip]:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"{path}: no such file")
    clips = []
    seen: set[str] = set()
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}: line {lineno}: malformed record ({exc.msg})") from exc
            try:
                clip = MusicClip(
                    id=rec["id"],
                    source_ref=rec.get("source_ref", ""),
                    duration_s=rec.get("duration_s", 0.0),
                    sample_rate=rec.get("sample_rate", 16000),
                    waveform=rec.get("waveform"),
                    features=rec.get("features"),
                )
            except (KeyError, ValueError) as exc:
                raise DatasetError(f"{path}: line {lineno}: {exc}") from exc
            if clip.id in seen:
                raise DatasetError(f"{path}: line {lineno}: duplicate clip id {clip.id!r}")
            seen.add(clip.id)
            clips.append(clip)
    return clips


def save_clips(clips: list[MusicClip], path: str | Path) -> None:
    path = Path(path)
    lines = []
    for clip in clips:
        rec: dict = {
            "id": clip.id,
            "source_ref": clip.source_ref,
            "duration_s": clip.duration_s,
            "sample_rate": clip.sample_rate,
        }
        if clip.waveform is not None:
            rec["waveform"] = clip.waveform
        if clip.features is not None:
            rec["features"] = clip.features
        lines.append(canonical_json(rec))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def synthesize_clips(n: int, duration_s: float = 2.0, sample_rate: int = 400,
                     seed: int = 0) -> list[MusicClip]:
    """Deterministic sine-mixture waveforms, for demos and toy training runs."""
    rng = np.random.default_rng(seed)
    length = round(duration_s * sample_rate)
    t = np.arange(length) / sample_rate
    clips = []
    for i in range(n):
        freqs = rng.uniform(20.0, sample_rate / 4.0, size=3)
        amps = rng.uniform(0.2, 1.0, size=3)
        wave = sum(a * np.sin(2 * math.pi * f * t) for a, f in zip(amps, freqs))
        wave = wave + 0.05 * rng.standard_normal(length)
        clips.append(MusicClip(
            id=f"clip{i:04d}",
            source_ref=f"synthetic:{seed}:{i}",
            duration_s=duration_s,
            sample_rate=sample_rate,
            waveform=[float(v) for v in wave],
        ))
    return clips


def synthesize_feature_clips(n: int, frames: int, dim: int, seed: int = 0) -> list[MusicClip]:
    """Clips carrying precomputed [frames x dim] features instead of audio."""
    rng = np.random.default_rng(seed)
    clips = []
    for i in range(n):
        feats = rng.standard_normal((frames, dim))
        clips.append(MusicClip(
            id=f"clip{i:04d}",
            source_ref=f"synthetic-features:{seed}:{i}",
            duration_s=float(frames),
            features=[[float(v) for v in row] for row in feats],
        ))
    return clips


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

@dataclass
class EncoderConfig:
    backend: str = "toy"            # toy | pretrained
    layers: int = 2
    frame_dim: int = 16
    frames: int = 8
    include_embedding_layer: bool = True
    seed: int = 0
    pretrained_path: str = ""


@dataclass
class AdapterConfig:
    compression: int = 4
    use_bias: bool = True
    init_seed: int = 0


@dataclass
class LMConfig:
    backend: str = "toy"            # toy | pretrained
    dim: int = 32
    layers: int = 2
    heads: int = 2
    seed: int = 0
    pretrained_path: str = ""


@dataclass
class PromptConfig:
    pre_music: str = ""
    post_music: str = ""
    answer_prefix: str = "###Assistant:"


@dataclass
class TrainConfig:
    batch_size: int = 8
    epochs: int = 2
    max_steps: int = 0              # 0 = derive from epochs
    learning_rate: float = 1e-4
    warmup_frac: float = 0.02
    weight_decay: float = 0.05
    grad_clip: float = 1.0
    seed: int = 0
    checkpoint_every: int = 0       # 0 = only at the end
    append_eos: bool = True
    out_dir: str = "runs/run"


@dataclass
class DataConfig:
    clips: str = ""
    captions: str = ""
    qa: str = ""
    musicqa: str = ""
    split: str = "train"
    partition: str = "mixed"
    caption_field: str = "caption_writing"
    test_clips: str = ""


@dataclass
class DatagenConfig:
    client: str = "mock"            # mock | http
    model: str = "gpt-4"
    api_base: str = "https://api.openai.com/v1"
    api_key_env: str = "OPENAI_API_KEY"
    max_workers: int = 1
    retries: int = 3
    retry_backoff_s: float = 1.0
    min_interval_s: float = 0.0


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    lm: LMConfig = field(default_factory=LMConfig)
    prompt: PromptConfig = field(default_factory=PromptConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    datagen: DatagenConfig = field(default_factory=DatagenConfig)

    def validate(self) -> None:
        if self.adapter.compression < 1:
            raise ConfigError("adapter.compression must be >= 1")
        for key, value in (("encoder.layers", self.encoder.layers),
                           ("encoder.frame_dim", self.encoder.frame_dim),
                           ("encoder.frames", self.encoder.frames),
                           ("lm.dim", self.lm.dim),
                           ("lm.layers", self.lm.layers),
                           ("lm.heads", self.lm.heads),
                           ("train.batch_size", self.train.batch_size)):
            if value < 1:
                raise ConfigError(f"{key} must be >= 1, got {value}")
        if self.lm.dim % self.lm.heads != 0:
            raise ConfigError("lm.dim must be divisible by lm.heads")
        if self.encoder.backend not in ("toy", "pretrained"):
            raise ConfigError(f"unknown encoder.backend {self.encoder.backend!r}")
        if self.lm.backend not in ("toy", "pretrained"):
            raise ConfigError(f"unknown lm.backend {self.lm.backend!r}")
        if self.data.partition not in ("short", "long", "mixed", "musicqa"):
            raise ConfigError(f"unknown data.partition {self.data.partition!r}")
        if self.data.split not in SPLITS:
            raise ConfigError(f"unknown data.split {self.data.split!r}")


_SECTIONS = ("encoder", "adapter", "lm", "prompt", "train", "data", "datagen")


def config_keys() -> dict[str, type]:
    """Dotted key -> value type for every addressable RunConfig field."""
    keys: dict[str, type] = {}
    cfg = RunConfig()
    for section in _SECTIONS:
        sub = getattr(cfg, section)
        for f in dataclasses.fields(sub):
            keys[f"{section}.{f.name}"] = type(getattr(sub, f.name))
    return keys


def _coerce(key: str, raw: str, target: type):
    raw = raw.strip()
    try:
        if target is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(f"expected a boolean, got {raw!r}")
        if target is int:
            return int(raw)
        if target is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: {exc}") from exc


def set_config_value(cfg: RunConfig, key: str, raw: str) -> None:
    """Set one dotted key from its string form, with type coercion."""
    known = config_keys()
    if key not in known:
        raise ConfigError(f"unknown config key {key!r}")
    section, name = key.split(".", 1)
    setattr(getattr(cfg, section), name, _coerce(key, raw, known[key]))


_CONFIG_LINE = re.compile(r"^\s*([A-Za-z_][\w.]*)\s*=\s*(.*?)\s*$")


def load_config(path: str | Path, overrides: dict[str, str] | None = None) -> RunConfig:
    """Parse a flat ``key = value`` document, then apply overrides on top."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{path}: no such file")
    cfg = RunConfig()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        m = _CONFIG_LINE.match(line)
        if not m:
            raise ConfigError(f"{path}: line {lineno}: expected 'key = value'")
        try:
            set_config_value(cfg, m.group(1), m.group(2))
        except ConfigError as exc:
            raise ConfigError(f"{path}: line {lineno}: {exc}") from exc
    for key, raw in (overrides or {}).items():
        set_config_value(cfg, key, raw)
    cfg.validate()
    return cfg


def dump_config(cfg: RunConfig) -> str:
    """Render a config back to its flat key = value form (snapshot files)."""
    lines = []
    for section in _SECTIONS:
        sub = getattr(cfg, section)
        for f in dataclasses.fields(sub):
            lines.append(f"{section}.{f.name} = {getattr(sub, f.name)}")
    return "\n".join(lines) + "\n"


def config_digest(cfg: RunConfig) -> str:
    """Digest of the sections that define checkpoint compatibility.

    Covers everything that determines parameter shapes or frozen-backend
    contents; excludes purely run-time settings (batching, paths, prompts).
    """
    arch = {
        "encoder": {
            "backend": cfg.encoder.backend,
            "layers": cfg.encoder.layers,
            "frame_dim": cfg.encoder.frame_dim,
            "include_embedding_layer": cfg.encoder.include_embedding_layer,
            "seed": cfg.encoder.seed,
        },
        "adapter": {
            "compression": cfg.adapter.compression,
            "use_bias": cfg.adapter.use_bias,
        },
        "lm": {
            "backend": cfg.lm.backend,
            "dim": cfg.lm.dim,
            "layers": cfg.lm.layers,
            "heads": cfg.lm.heads,
            "seed": cfg.lm.seed,
        },
    }
    return digest_text(canonical_json(arch))
