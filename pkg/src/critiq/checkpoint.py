"""Versioned binary checkpoint container.

Layout: magic bytes ``MMVAE1``, a length-prefixed JSON header (format
version, training config, dims, id-maps digest, tensor manifest), then the
tensors as length-prefixed little-endian float32 blocks in manifest order.
A trained blend gate may follow as a second section tagged ``BLEND1`` with
the same header+tensors structure.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

MODEL_MAGIC = b"MMVAE1"
GATE_MAGIC = b"BLEND1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def dataset_digest(dataset):
    """Digest of the id maps; ties a checkpoint to its vocabulary."""
    h = hashlib.sha256()
    for ids in (dataset.user_ids.ids(), dataset.item_ids.ids(),
                dataset.keyphrase_labels.ids()):
        for ext in ids:
            h.update(str(ext).encode())
            h.update(b"\x00")
        h.update(b"\x01")
    return h.hexdigest()


def _write_section(fh, magic, header, tensors):
    fh.write(magic)
    blob = json.dumps(header, sort_keys=True).encode()
    fh.write(struct.pack("<I", len(blob)))
    fh.write(blob)
    for name in header["tensors"]:
        data = np.ascontiguousarray(tensors[name], dtype="<f4").tobytes()
        fh.write(struct.pack("<Q", len(data)))
        fh.write(data)


def _read_exact(fh, n, what):
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def _read_section(fh, magic):
    got = fh.read(len(magic))
    if got != magic:
        raise CheckpointError(f"bad section magic {got!r}, expected {magic!r}")
    (header_len,) = struct.unpack("<I", _read_exact(fh, 4, "header length"))
    header = json.loads(_read_exact(fh, header_len, "header"))
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')!r}")
    tensors = {}
    for name in header["tensors"]:
        (nbytes,) = struct.unpack("<Q", _read_exact(fh, 8, f"tensor {name} length"))
        raw = _read_exact(fh, nbytes, f"tensor {name}")
        flat = np.frombuffer(raw, dtype="<f4")
        tensors[name] = flat.reshape(header["shapes"][name]).astype(np.float32)
    return header, tensors


def save_checkpoint(model, path, ids_digest, gate=None):
    params = model.param_dict()
    header = {
        "version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "dims": {"n_items": model.n_items, "n_keyphrases": model.n_keyphrases},
        "ids_digest": ids_digest,
        "tensors": sorted(params),
        "shapes": {k: list(params[k].shape) for k in params},
    }
    with open(path, "wb") as fh:
        _write_section(fh, MODEL_MAGIC, header, params)
        if gate is not None:
            gate_params = gate.param_dict()
            gate_header = {
                "version": FORMAT_VERSION,
                "latent_dim": gate.latent_dim,
                "tensors": sorted(gate_params),
                "shapes": {k: list(gate_params[k].shape) for k in gate_params},
            }
            _write_section(fh, GATE_MAGIC, gate_header, gate_params)


def load_checkpoint(path, expected_digest=None):
    """Returns (model, gate or None, header). Validates version, digest,
    and tensor shapes against the stored config."""
    from critiq.critiquing import BlendGate
    from critiq.model import MultimodalVae, TrainingConfig

    with open(path, "rb") as fh:
        header, tensors = _read_section(fh, MODEL_MAGIC)
        gate = None
        peek = fh.read(len(GATE_MAGIC))
        if peek:
            if peek != GATE_MAGIC:
                raise CheckpointError(f"unexpected trailing section {peek!r}")
            fh.seek(-len(GATE_MAGIC), 1)
            gate_header, gate_tensors = _read_section(fh, GATE_MAGIC)

    if expected_digest is not None and header["ids_digest"] != expected_digest:
        raise CheckpointError(
            "checkpoint id-maps digest does not match the provided dataset")

    config = TrainingConfig.from_dict(header["config"])
    dims = header["dims"]
    model = MultimodalVae(dims["n_items"], dims["n_keyphrases"], config)
    params = model.param_dict()
    if sorted(params) != header["tensors"]:
        raise CheckpointError("tensor manifest does not match model architecture")
    for key, arr in params.items():
        stored = tensors[key]
        if stored.shape != arr.shape:
            raise CheckpointError(
                f"tensor {key} shape {stored.shape} does not match config {arr.shape}")
        arr[...] = stored

    if peek:
        gate = BlendGate(gate_header["latent_dim"])
        gate_params = gate.param_dict()
        if sorted(gate_params) != gate_header["tensors"]:
            raise CheckpointError("gate tensor manifest mismatch")
        for key, arr in gate_params.items():
            stored = gate_tensors[key]
            if stored.shape != arr.shape:
                raise CheckpointError(f"gate tensor {key} shape mismatch")
            arr[...] = stored
    return model, gate, header
