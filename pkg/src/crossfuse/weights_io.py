"""Weight-file container: magic "ICAF", version, JSON manifest, payload.

Layout:

    bytes 0..3    magic b"ICAF"
    bytes 4..7    format version, uint32 little-endian
    bytes 8..11   manifest byte length, uint32 little-endian
    manifest      UTF-8 JSON {"meta": {...}, "tensors": [{name, shape, dtype}]}
    payload       tensors concatenated little-endian, manifest order

The manifest meta carries the pipeline configuration and input extents,
so a load reconstructs the full weight structure, sharing included.
Round trips are byte-exact.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from . import tensor_core as tc
from .cfe import CfeParams
from .dmff import DmffConfig, DmffWeights, _mode_uses_nin
from .icfe import IcfeParams
from .sfs import ConvShrinkParam, MixedPoolParam
from .tensor_core import Tensor
from .token_codec import PositionalEmbedding

MAGIC = b"ICAF"
VERSION = 1


class WeightsFormatError(Exception):
    """Base for weight-file faults."""


class BadMagicError(WeightsFormatError):
    pass


class VersionMismatchError(WeightsFormatError):
    pass


class ManifestError(WeightsFormatError):
    pass


class TruncatedPayloadError(WeightsFormatError):
    pass


def save_weights(wts: DmffWeights, path):
    cfg = wts.cfg
    tensors = list(wts.named_tensors())
    manifest = {
        "meta": {
            "mode": cfg.mode,
            "shrink_variant": cfg.shrink_variant,
            "shrink_window": cfg.shrink_window,
            "heads": cfg.heads,
            "ffn_hidden": cfg.ffn_hidden,
            "iterations": cfg.iterations,
            "input_duplication": cfg.input_duplication,
            "sequential_update": cfg.sequential_update,
            "height": wts.height,
            "width": wts.width,
            "channels": wts.channels,
        },
        "tensors": [
            {"name": name, "shape": list(t.shape), "dtype": tc.dtype_name(t.dtype)}
            for name, t in tensors
        ],
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, t in tensors:
            fh.write(np.ascontiguousarray(t.data, dtype=t.data.dtype.newbyteorder("<")).tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    blob = fh.read(n)
    if len(blob) != n:
        raise TruncatedPayloadError(f"file ends inside {what}: wanted {n} bytes, got {len(blob)}")
    return blob


def load_weights(path) -> DmffWeights:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != MAGIC:
            raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != VERSION:
            raise VersionMismatchError(f"unsupported format version {version}")
        (manifest_len,) = struct.unpack("<I", _read_exact(fh, 4, "manifest length"))
        manifest_blob = _read_exact(fh, manifest_len, "manifest")
        try:
            manifest = json.loads(manifest_blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ManifestError(f"manifest is not valid JSON: {exc}") from exc
        payload = fh.read()
    try:
        meta = manifest["meta"]
        entries = manifest["tensors"]
    except (KeyError, TypeError) as exc:
        raise ManifestError(f"manifest missing section: {exc}") from exc

    tensors = {}
    offset = 0
    for entry in entries:
        try:
            name = entry["name"]
            shape = tuple(int(n) for n in entry["shape"])
            dtype = tc.dtype_from_name(entry["dtype"])
        except (KeyError, TypeError, ValueError, tc.ConfigurationError) as exc:
            raise ManifestError(f"bad tensor entry {entry!r}: {exc}") from exc
        if any(n < 1 for n in shape) or not shape:
            raise ManifestError(f"tensor {name!r} declares invalid shape {shape}")
        dt = np.dtype(dtype).newbyteorder("<")
        nbytes = int(np.prod(shape)) * dt.itemsize
        if offset + nbytes > len(payload):
            raise TruncatedPayloadError(
                f"payload ends inside tensor {name!r}: need {offset + nbytes} bytes, "
                f"have {len(payload)}"
            )
        arr = np.frombuffer(payload, dtype=dt, count=int(np.prod(shape)),
                            offset=offset).reshape(shape)
        tensors[name] = Tensor._wrap(np.ascontiguousarray(arr, dtype=dtype))
        offset += nbytes
    if offset != len(payload):
        raise ManifestError(
            f"manifest accounts for {offset} payload bytes but file has {len(payload)}"
        )
    return _assemble(meta, tensors)


def _build_cfe(tensors, prefix: str, heads: int) -> CfeParams:
    def grab(leaf):
        try:
            return tensors[prefix + leaf]
        except KeyError:
            raise ManifestError(f"missing tensor {prefix + leaf!r}") from None

    return CfeParams(
        w_q=grab("w_q"), w_k=grab("w_k"), w_v=grab("w_v"), w_o=grab("w_o"),
        ffn_w1=grab("ffn_w1"), ffn_b1=grab("ffn_b1"),
        ffn_w2=grab("ffn_w2"), ffn_b2=grab("ffn_b2"),
        alpha=grab("alpha"), beta=grab("beta"),
        gamma=grab("gamma"), delta=grab("delta"),
        heads=heads,
    )


def _build_sfs(tensors, prefix: str, variant: str):
    if variant == "pool":
        if prefix + "lambda_raw" not in tensors:
            raise ManifestError(f"missing tensor {prefix}lambda_raw")
        return MixedPoolParam(tensors[prefix + "lambda_raw"])
    if prefix + "w" not in tensors or prefix + "b" not in tensors:
        raise ManifestError(f"missing tensors under {prefix}")
    return ConvShrinkParam(tensors[prefix + "w"], tensors[prefix + "b"])


def _assemble(meta, tensors) -> DmffWeights:
    try:
        cfg = DmffConfig(
            shrink_variant=meta["shrink_variant"],
            shrink_window=int(meta["shrink_window"]),
            heads=int(meta["heads"]),
            ffn_hidden=int(meta["ffn_hidden"]),
            iterations=int(meta["iterations"]),
            mode=meta["mode"],
            input_duplication=meta.get("input_duplication", "none"),
            sequential_update=bool(meta.get("sequential_update", False)),
        )
        height = int(meta["height"])
        width = int(meta["width"])
        channels = int(meta["channels"])
    except (KeyError, TypeError, ValueError, tc.ConfigurationError) as exc:
        raise ManifestError(f"bad meta section: {exc}") from exc

    wts = DmffWeights(cfg=cfg, height=height, width=width, channels=channels)
    mode = cfg.mode
    if mode in ("a", "b", "c", "d"):
        if mode in ("a", "b", "c"):
            shared = _build_cfe(tensors, "cfe.", cfg.heads)
            wts.icfe = IcfeParams(shared, shared, shared=True, iterations=cfg.iterations)
        else:
            wts.icfe = IcfeParams(
                _build_cfe(tensors, "cfe_r.", cfg.heads),
                _build_cfe(tensors, "cfe_t.", cfg.heads),
                shared=False, iterations=cfg.iterations,
            )
        for leaf in ("pe_r", "pe_t"):
            if f"{leaf}.table" not in tensors:
                raise ManifestError(f"missing tensor {leaf}.table")
        wts.pe_r = PositionalEmbedding(tensors["pe_r.table"])
        wts.pe_t = PositionalEmbedding(tensors["pe_t.table"])
        wts.sfs_r = _build_sfs(tensors, "sfs_r.", cfg.shrink_variant)
        wts.sfs_t = _build_sfs(tensors, "sfs_t.", cfg.shrink_variant)
    if _mode_uses_nin(mode):
        if "nin.w" not in tensors or "nin.b" not in tensors:
            raise ManifestError("missing fusion tensors nin.w / nin.b")
        wts.nin_w = tensors["nin.w"]
        wts.nin_b = tensors["nin.b"]
    return wts
