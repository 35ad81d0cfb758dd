"""Frozen toy modality encoders and the synthetic attribute datasets they read.

Each toy modality has a small attribute grammar (e.g. size/color/shape for
images). A payload is an attribute assignment plus an ``instance`` integer
that adds a little per-example jitter. Encoders are seeded random linear maps
over one-hot attribute codes followed by ``tanh``; they hold no trainable
state. Video frames go through the image encoder, mirroring a shared
image/video backbone.
"""
from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from . import numkernel as nk

MODALITIES = ("image", "video", "audio", "pc3d")
SEQUENTIAL = ("video", "audio")


@dataclass(frozen=True)
class Grammar:
    attributes: tuple[tuple[str, tuple[str, ...]], ...]
    caption: str
    question: str = "what is the {attribute}?"

    def __post_init__(self):
        if not self.attributes or any(not vals for _, vals in self.attributes):
            raise ValueError("empty grammar: need at least one attribute with at least one value")

    @property
    def names(self) -> list[str]:
        return [a for a, _ in self.attributes]

    def values(self, name: str) -> tuple[str, ...]:
        return dict(self.attributes)[name]

    @property
    def n_classes(self) -> int:
        n = 1
        for _, vals in self.attributes:
            n *= len(vals)
        return n

    @property
    def width(self) -> int:
        return sum(len(v) for _, v in self.attributes)

    def render(self, attrs: dict) -> str:
        return self.caption.format(**attrs)

    def words(self) -> set[str]:
        out = set(self.caption.replace("{", " ").replace("}", " ").split())
        out |= set(self.question.replace("{attribute}", " ").split())
        for name, vals in self.attributes:
            out.add(name)
            out.update(vals)
        return out


GRAMMARS = {
    "image": Grammar(
        (("size", ("small", "large", "tiny", "huge")),
         ("color", ("red", "blue", "green", "yellow")),
         ("shape", ("cube", "sphere", "cone", "ring"))),
        caption="a {size} {color} {shape}"),
    "video": Grammar(
        (("size", ("small", "large", "tiny", "huge")),
         ("color", ("red", "blue", "green", "yellow")),
         ("shape", ("cube", "sphere", "cone", "ring"))),
        caption="a {size} {color} {shape} moves"),
    "audio": Grammar(
        (("source", ("man", "woman", "child", "crowd")),
         ("sound", ("speaks", "sings", "laughs", "claps")),
         ("background", ("rain", "wind", "traffic", "music"))),
        caption="a {source} {sound} with {background}"),
    "pc3d": Grammar(
        (("style", ("modern", "antique", "simple", "ornate")),
         ("material", ("wooden", "metal", "plastic", "stone")),
         ("object", ("chair", "table", "lamp", "sofa"))),
        caption="3d model of a {style} {material} {object}"),
}

# which encoder weights a modality uses
ENCODER_FAMILY = {"image": "image", "video": "image", "audio": "audio", "pc3d": "pc3d"}


@dataclass
class ModalityRecord:
    modality: str
    payload: dict
    target: str
    record_id: str
    instruction: str = ""
    text_input: str = ""
    task: str = "caption"

    def to_json(self) -> dict:
        d = {"record_id": self.record_id, "modality": self.modality, "payload": self.payload}
        if self.instruction:
            d["instruction"] = self.instruction
        if self.text_input:
            d["text_input"] = self.text_input
        d["target"] = self.target
        return d

    @classmethod
    def from_json(cls, d: dict, task: str = "caption") -> "ModalityRecord":
        return cls(modality=d["modality"], payload=d["payload"], target=d["target"],
                   record_id=d["record_id"], instruction=d.get("instruction", ""),
                   text_input=d.get("text_input", ""), task=task)


@dataclass
class EncodedFrames:
    frames: torch.Tensor  # [N, tokens_enc, d_enc]
    modality: str

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]


@dataclass
class EncoderConfig:
    tokens_enc: int = 8
    d_enc: int = 16
    video_frames: int = 5
    audio_frames: int = 2
    seed: int = 0
    jitter: float = 0.05

    def frames_for(self, modality: str) -> int:
        return {"video": self.video_frames, "audio": self.audio_frames}.get(modality, 1)


class PayloadError(ValueError):
    pass


def _stable_seed(*parts) -> list[int]:
    return [zlib.crc32(str(p).encode()) for p in parts]


def frame_attributes(n_attr: int, n_frames: int) -> list[list[int]]:
    """Attribute indices carried by each frame of a sequential modality."""
    if n_frames == 1:
        return [list(range(n_attr))]
    period = min(n_frames, n_attr)
    return [[j for j in range(n_attr) if j % period == f % period] for f in range(n_frames)]


class ToyEncoder:
    """Frozen encoder for one modality; call :meth:`encode` on records."""

    def __init__(self, modality: str, config: EncoderConfig | None = None):
        if modality not in MODALITIES:
            raise ValueError(f"unknown modality {modality!r}; expected one of {MODALITIES}")
        self.modality = modality
        self.config = config or EncoderConfig()
        self.grammar = GRAMMARS[modality]
        family = ENCODER_FAMILY[modality]
        cfg = self.config
        rng = np.random.default_rng(_stable_seed(cfg.seed, "encoder", family))
        w = rng.normal(0.0, 1.0, size=(cfg.tokens_enc, self.grammar.width, cfg.d_enc))
        b = rng.normal(0.0, 0.1, size=(cfg.tokens_enc, cfg.d_enc))
        self.weight = torch.tensor(w, dtype=nk.DEFAULT_DTYPE)
        self.bias = torch.tensor(b, dtype=nk.DEFAULT_DTYPE)

    def parameters(self) -> dict[str, torch.Tensor]:
        return {f"{self.modality}.weight": self.weight, f"{self.modality}.bias": self.bias}

    def _one_hot(self, attrs: dict, keep: Iterable[int]) -> np.ndarray:
        x = np.zeros(self.grammar.width)
        keep = set(keep)
        off = 0
        for j, (name, vals) in enumerate(self.grammar.attributes):
            if j in keep:
                x[off + vals.index(attrs[name])] = 1.0
            off += len(vals)
        return x

    def validate(self, payload: dict) -> None:
        if "embedding_file" in payload:
            return
        if "attributes" not in payload:
            raise PayloadError(f"{self.modality} payload missing field 'attributes'")
        attrs = payload["attributes"]
        for name, vals in self.grammar.attributes:
            if name not in attrs:
                raise PayloadError(f"{self.modality} payload missing attribute {name!r}")
            if attrs[name] not in vals:
                raise PayloadError(f"{self.modality} payload field {name!r} has unknown value {attrs[name]!r}")
        extra = set(attrs) - set(self.grammar.names)
        if extra:
            raise PayloadError(f"{self.modality} payload has unexpected attributes {sorted(extra)}")
        if not isinstance(payload.get("instance", 0), int):
            raise PayloadError(f"{self.modality} payload field 'instance' must be an integer")

    def encode(self, record: ModalityRecord) -> EncodedFrames:
        if record.modality != self.modality:
            raise ValueError(f"encoder for {self.modality!r} got a {record.modality!r} record")
        payload = record.payload
        self.validate(payload)
        if "embedding_file" in payload:
            frames = read_embeddings(payload["embedding_file"])
            if frames.shape[-1] != self.config.d_enc:
                raise PayloadError(f"embedding file width {frames.shape[-1]} != d_enc {self.config.d_enc}")
            return EncodedFrames(torch.tensor(frames, dtype=nk.DEFAULT_DTYPE), self.modality)
        cfg = self.config
        n_frames = cfg.frames_for(self.modality)
        attrs = payload["attributes"]
        instance = int(payload.get("instance", 0))
        noise_rng = np.random.default_rng(_stable_seed(cfg.seed, "jitter", self.modality, instance))
        noise = noise_rng.normal(0.0, cfg.jitter, size=(n_frames, cfg.tokens_enc, cfg.d_enc))
        codes = np.stack([self._one_hot(attrs, keep) for keep in frame_attributes(len(attrs), n_frames)])
        x = torch.tensor(codes, dtype=self.weight.dtype)  # [N, width]
        with torch.no_grad():
            pre = torch.einsum("nw,twd->ntd", x, self.weight) + self.bias
            z = torch.tanh(pre + torch.tensor(noise, dtype=pre.dtype))
        return EncodedFrames(z, self.modality)


def build_encoders(config: EncoderConfig | None = None) -> dict[str, ToyEncoder]:
    return {m: ToyEncoder(m, config) for m in MODALITIES}


def encode(record: ModalityRecord, config: EncoderConfig | None = None) -> EncodedFrames:
    return ToyEncoder(record.modality, config).encode(record)


# ----------------------------------------------------------------------------
# precomputed embedding container
# ----------------------------------------------------------------------------

EMB_MAGIC = b"MODEMB01"
EMB_VERSION = 1


def write_embeddings(path, frames: np.ndarray) -> None:
    """Write [N, tokens, d_enc] float64 embeddings for the file-reference payload."""
    frames = np.ascontiguousarray(frames, dtype="<f8")
    if frames.ndim != 3:
        raise ValueError("embeddings must be [N, tokens, d_enc]")
    n, t, d = frames.shape
    header = EMB_MAGIC + struct.pack("<IIII", EMB_VERSION, d, t, n)
    Path(path).write_bytes(header + frames.tobytes())


def read_embeddings(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:8] != EMB_MAGIC:
        raise PayloadError(f"{path}: bad magic")
    version, d, t, n = struct.unpack("<IIII", blob[8:24])
    if version != EMB_VERSION:
        raise PayloadError(f"{path}: unsupported version {version}")
    data = np.frombuffer(blob[24:], dtype="<f8")
    if data.size != n * t * d:
        raise PayloadError(f"{path}: expected {n * t * d} floats, found {data.size}")
    return data.reshape(n, t, d).astype(np.float64)


# ----------------------------------------------------------------------------
# toy datasets
# ----------------------------------------------------------------------------

def split_of(record_id: str) -> str:
    bucket = int(hashlib.sha256(record_id.encode()).hexdigest(), 16) % 10
    return "test" if bucket == 0 else "val" if bucket == 1 else "train"


def make_toy_dataset(modality: str, size: int, seed: int, task: str = "caption",
                     grammar: Grammar | None = None) -> list[ModalityRecord]:
    """Sample ``size`` records; captions or single-attribute QA pairs."""
    if size < 1:
        raise ValueError("size must be >= 1")
    grammar = grammar or GRAMMARS[modality]
    if task not in ("caption", "qa"):
        raise ValueError(f"toy datasets support caption and qa tasks, not {task!r}")
    rng = np.random.default_rng(_stable_seed(seed, "dataset", modality, task))
    records = []
    for i in range(size):
        attrs = {name: vals[int(rng.integers(len(vals)))] for name, vals in grammar.attributes}
        instance = int(rng.integers(1 << 30))
        payload = {"attributes": attrs, "instance": instance}
        rid = f"{modality}-{task}-{seed}-{i:05d}"
        if task == "caption":
            records.append(ModalityRecord(modality, payload, grammar.render(attrs), rid, task="caption"))
        else:
            asked = grammar.names[int(rng.integers(len(grammar.names)))]
            question = grammar.question.format(attribute=asked)
            records.append(ModalityRecord(modality, payload, attrs[asked], rid,
                                          instruction=question, task="qa"))
    return records


def split_records(records: Sequence[ModalityRecord]) -> dict[str, list[ModalityRecord]]:
    out = {"train": [], "val": [], "test": []}
    for r in records:
        out[split_of(r.record_id)].append(r)
    return out


def write_jsonl(path, records: Iterable) -> None:
    lines = []
    for r in records:
        d = r.to_json() if hasattr(r, "to_json") else r
        lines.append(json.dumps(d, ensure_ascii=False, separators=(", ", ": ")))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_records(path, task: str = "caption") -> list[ModalityRecord]:
    recs = [ModalityRecord.from_json(d, task) for d in read_jsonl(path)]
    seen = set()
    for r in recs:
        if r.record_id in seen:
            raise ValueError(f"{path}: duplicate record_id {r.record_id!r}")
        seen.add(r.record_id)
    return recs
