"""Checkpoint = ``manifest.txt`` (key: value text) + ``params.npz`` (named arrays).

Array names::

    shared/<layer>/<param>          conv and FC weights
    bn/<resolution>/<layer>/<param> gamma, beta, running_mean, running_var
    ensemble/raw_scores

Every array is stored little-endian float32; the npy header of each entry
records its shape.
"""

from __future__ import annotations

import hashlib
import io
import os
import zipfile
from pathlib import Path

import numpy as np
import torch

from .model import BN_EPS, BN_MOMENTUM, SwitchableClassifier

FORMAT_VERSION = 1
MANIFEST = "manifest.txt"
ARCHIVE = "params.npz"
BN_PARAMS = {"gamma": "weight", "beta": "bias", "running_mean": "running_mean",
             "running_var": "running_var"}


class CheckpointError(RuntimeError):
    pass


def _split(name):
    layer, _, param = name.rpartition(".")
    return layer, param


def named_arrays(model: SwitchableClassifier):
    """``{archive name: tensor}`` for every persistent quantity of ``model``."""
    out = {}
    for name, p in model.shared_parameters():
        layer, param = _split(name)
        out[f"shared/{layer}/{param}"] = p
    labels = model.bank_labels()
    for layer, m in model.bn_layers.items():
        for b, slot in enumerate(m.banks):
            for key, attr in BN_PARAMS.items():
                out[f"bn/{labels[b]}/{layer}/{key}"] = getattr(slot, attr)
    out["ensemble/raw_scores"] = model.raw_scores
    return out


def _manifest(model: SwitchableClassifier, digest: str, count: int) -> str:
    fields = {
        "format_version": FORMAT_VERSION,
        "arch_id": model.arch.name,
        "num_classes": model.num_classes,
        "resolutions": ",".join(str(r) for r in model.profile),
        "branches": ",".join(str(r) for r in model.branches),
        "shared_bn": str(model.shared_bn).lower(),
        "banks": ",".join(model.bank_labels()),
        "bn_eps": repr(BN_EPS),
        "bn_momentum": repr(BN_MOMENTUM),
        "dtype": "float32-le",
        "array_count": count,
        "archive_sha256": digest,
    }
    return "".join(f"{k}: {v}\n" for k, v in fields.items())


def save_checkpoint(model: SwitchableClassifier, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arrays = {k: v.detach().cpu().numpy().astype("<f4") for k, v in named_arrays(model).items()}
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    data = buf.getvalue()
    digest = hashlib.sha256(data).hexdigest()
    for name, content in ((ARCHIVE, data), (MANIFEST, _manifest(model, digest, len(arrays)).encode("utf-8"))):
        tmp = path / (name + ".tmp")
        tmp.write_bytes(content)
        os.replace(tmp, path / name)
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        text = (path / MANIFEST).read_text(encoding="utf-8")
    except OSError as e:
        raise CheckpointError(f"cannot read manifest in {path}: {e}") from e
    fields = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise CheckpointError(f"malformed manifest line {line!r}")
        fields[key.strip()] = value.strip()
    return fields


def load_checkpoint(path) -> SwitchableClassifier:
    path = Path(path)
    man = read_manifest(path)
    try:
        version = int(man["format_version"])
    except (KeyError, ValueError):
        raise CheckpointError("manifest lacks a valid format_version") from None
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    try:
        resolutions = [int(r) for r in man["resolutions"].split(",")]
        branches = [int(r) for r in man["branches"].split(",")]
        model = SwitchableClassifier(man["arch_id"], resolutions, int(man["num_classes"]),
                                     shared_bn=man["shared_bn"] == "true", branches=branches)
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"manifest is incomplete or invalid: {e}") from e
    if man.get("banks") != ",".join(model.bank_labels()):
        raise CheckpointError(f"manifest banks {man.get('banks')!r} disagree with its resolutions")

    try:
        data = (path / ARCHIVE).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read parameter archive: {e}") from e
    if "archive_sha256" in man and hashlib.sha256(data).hexdigest() != man["archive_sha256"]:
        raise CheckpointError("parameter archive is corrupted (checksum mismatch)")
    try:
        with np.load(io.BytesIO(data), allow_pickle=False) as npz:
            arrays = {k: npz[k] for k in npz.files}
    except (zipfile.BadZipFile, ValueError, OSError, EOFError) as e:
        raise CheckpointError(f"parameter archive is corrupted: {e}") from e

    expected = named_arrays(model)
    missing = sorted(set(expected) - set(arrays))
    if missing:
        banks = sorted({k.split("/")[1] for k in missing if k.startswith("bn/")})
        if banks:
            raise CheckpointError(f"archive is missing BN bank entries for resolution(s) "
                                  f"{', '.join(banks)} (e.g. {missing[0]})")
        raise CheckpointError(f"archive is missing arrays: {', '.join(missing[:5])}")
    extra = sorted(set(arrays) - set(expected))
    if extra:
        raise CheckpointError(f"archive holds arrays the manifest does not declare: {', '.join(extra[:5])}")
    if "array_count" in man and int(man["array_count"]) != len(arrays):
        raise CheckpointError("manifest array_count disagrees with the archive")
    with torch.no_grad():
        for name, target in expected.items():
            arr = arrays[name]
            if tuple(arr.shape) != tuple(target.shape):
                raise CheckpointError(f"{name}: archive shape {arr.shape} != model shape {tuple(target.shape)}")
            if arr.dtype != np.dtype("<f4"):
                raise CheckpointError(f"{name}: expected little-endian float32, got {arr.dtype}")
            target.copy_(torch.from_numpy(arr.copy()))
    model.eval()
    return model
