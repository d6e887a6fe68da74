"""
Checkpoints.

Binary layout: the magic ``RPGN``, a little-endian ``uint32`` format
version, a little-endian ``uint64`` header length, the UTF-8 JSON header,
then every parameter as little-endian ``float64`` in header order. The
header carries a SHA-256 checksum of the parameter blob.
"""

import hashlib
import logging
import struct
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Tuple

import numpy as np

from ..models.checkpoint import CHECKPOINT_FORMAT_VERSION, CheckpointHeader, ModelKind, ParameterEntry
from ..utils.validation import CheckpointError, CheckpointVersionError, ShapeMismatchError
from .aligner import AlignerModel, DecodeTransform
from .corpus import Vocabulary
from .gan import Discriminator, Generator
from .mle import MleModel
from .numerics import restore_rng, rng_state

logger = logging.getLogger(__name__)

MAGIC = b"RPGN"
_PREFIX = struct.Struct("<4sIQ")


def save_checkpoint(
    path: Path,
    kind: ModelKind,
    params: Iterable[Tuple[str, np.ndarray]],
    architecture: Optional[Dict[str, Any]] = None,
    variant: Optional[str] = None,
    rng: Optional[np.random.Generator] = None,
    metadata: Optional[Dict[str, Any]] = None,
) -> CheckpointHeader:
    """
    Write named parameters and their header.

    Args:
        path: Destination file
        kind: Model kind
        params: ``(name, array)`` pairs in storage order
        architecture: Constructor arguments of the model
        variant: Recurrent variant, if any
        rng: Random stream whose state should be stored
        metadata: Extra JSON-compatible run metadata

    Returns:
        The header written
    """
    entries = []
    chunks = []
    for name, array in params:
        entries.append(ParameterEntry(name=name, shape=list(array.shape)))
        chunks.append(np.ascontiguousarray(array, dtype="<f8").tobytes())
    blob = b"".join(chunks)
    header = CheckpointHeader(
        kind=kind,
        variant=variant,
        architecture=architecture or {},
        entries=entries,
        rng_state=rng_state(rng) if rng is not None else None,
        metadata=metadata or {},
        checksum=hashlib.sha256(blob).hexdigest(),
    )
    header_bytes = header.model_dump_json().encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_PREFIX.pack(MAGIC, CHECKPOINT_FORMAT_VERSION, len(header_bytes)))
        f.write(header_bytes)
        f.write(blob)
    logger.info(f"Saved {kind.value} checkpoint ({len(entries)} arrays) to {path}")
    return header


def load_checkpoint(path: Path) -> Tuple[CheckpointHeader, Dict[str, np.ndarray]]:
    """
    Read and verify a checkpoint.

    Raises:
        CheckpointVersionError: Written by a different format version
        CheckpointError: Truncated, corrupt or otherwise unreadable file
    """
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if len(data) < _PREFIX.size:
        raise CheckpointError(f"{path} is too short to be a checkpoint")
    magic, version, header_len = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path} has format version {version}, expected {CHECKPOINT_FORMAT_VERSION}"
        )
    start = _PREFIX.size
    try:
        header = CheckpointHeader.model_validate_json(data[start:start + header_len])
    except ValueError as e:
        raise CheckpointError(f"corrupt checkpoint header in {path}: {e}") from e
    blob = data[start + header_len:]
    if len(blob) != 8 * header.total_size:
        raise CheckpointError(f"{path}: parameter blob has {len(blob)} bytes, expected {8 * header.total_size}")
    if hashlib.sha256(blob).hexdigest() != header.checksum:
        raise CheckpointError(f"{path}: checksum mismatch")

    arrays: Dict[str, np.ndarray] = {}
    offset = 0
    for entry in header.entries:
        count = int(np.prod(entry.shape, dtype=np.int64))
        flat = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
        arrays[entry.name] = flat.astype(np.float64).reshape(entry.shape)
        offset += 8 * count
    return header, arrays


def assign_parameters(model: Any, arrays: Dict[str, np.ndarray]) -> None:
    """Copy loaded arrays into a model's parameters by name."""
    names = [name for name, _ in model.named_parameters()]
    if set(names) != set(arrays):
        missing = sorted(set(names) - set(arrays))
        extra = sorted(set(arrays) - set(names))
        raise CheckpointError(f"parameter names differ (missing {missing}, unexpected {extra})")
    for name, target in model.named_parameters():
        source = arrays[name]
        if source.shape != target.shape:
            raise ShapeMismatchError(f"parameter {name}: checkpoint {source.shape}, model {target.shape}")
        target[...] = source


def restored_rng(header: CheckpointHeader) -> Optional[np.random.Generator]:
    return restore_rng(header.rng_state) if header.rng_state is not None else None


def _expect_kind(header: CheckpointHeader, kind: ModelKind, path: Path) -> None:
    if header.kind != kind:
        raise CheckpointError(f"{path} holds a {header.kind.value} checkpoint, expected {kind.value}")


def save_aligner(
    path: Path,
    model: AlignerModel,
    vocab: Vocabulary,
    rng: Optional[np.random.Generator] = None,
    metadata: Optional[Dict[str, Any]] = None,
) -> CheckpointHeader:
    meta = dict(metadata or {})
    meta["vocabulary"] = vocab.tokens
    meta["frozen"] = model.frozen
    return save_checkpoint(path, ModelKind.ALIGNER, model.named_parameters(), model.architecture(), rng=rng, metadata=meta)


def load_aligner(path: Path) -> Tuple[AlignerModel, Vocabulary, CheckpointHeader]:
    """Rebuild an aligner (frozen again if it was saved frozen) and its vocabulary."""
    header, arrays = load_checkpoint(path)
    _expect_kind(header, ModelKind.ALIGNER, path)
    model = AlignerModel.from_architecture(header.architecture)
    assign_parameters(model, arrays)
    if header.metadata.get("frozen"):
        model.freeze()
    return model, Vocabulary(header.metadata["vocabulary"]), header


def save_generator(
    path: Path, gen: Generator, rng: Optional[np.random.Generator] = None, metadata: Optional[Dict[str, Any]] = None
) -> CheckpointHeader:
    return save_checkpoint(
        path, ModelKind.GENERATOR, gen.named_parameters(), gen.architecture(), gen.variant.value, rng, metadata
    )


def load_generator(path: Path, f_lt: DecodeTransform) -> Tuple[Generator, CheckpointHeader]:
    """Rebuild a generator around the aligner's decode transform."""
    header, arrays = load_checkpoint(path)
    _expect_kind(header, ModelKind.GENERATOR, path)
    gen = Generator.from_architecture(header.architecture, f_lt)
    assign_parameters(gen, arrays)
    return gen, header


def save_discriminator(
    path: Path, disc: Discriminator, rng: Optional[np.random.Generator] = None, metadata: Optional[Dict[str, Any]] = None
) -> CheckpointHeader:
    return save_checkpoint(
        path, ModelKind.DISCRIMINATOR, disc.named_parameters(), disc.architecture(), disc.stack.variant.value, rng, metadata
    )


def load_discriminator(path: Path) -> Tuple[Discriminator, CheckpointHeader]:
    header, arrays = load_checkpoint(path)
    _expect_kind(header, ModelKind.DISCRIMINATOR, path)
    disc = Discriminator.from_architecture(header.architecture)
    assign_parameters(disc, arrays)
    return disc, header


def save_mle(
    path: Path, model: MleModel, rng: Optional[np.random.Generator] = None, metadata: Optional[Dict[str, Any]] = None
) -> CheckpointHeader:
    return save_checkpoint(
        path, ModelKind.MLE, model.named_parameters(), model.architecture(), model.variant.value, rng, metadata
    )


def load_mle(path: Path) -> Tuple[MleModel, CheckpointHeader]:
    header, arrays = load_checkpoint(path)
    _expect_kind(header, ModelKind.MLE, path)
    model = MleModel.from_architecture(header.architecture)
    assign_parameters(model, arrays)
    return model, header
