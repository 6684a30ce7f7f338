"""Checkpoint and rules-file builders shared by the exporter tests."""

import json
import struct

import numpy as np
from safetensors.numpy import save_file

# Rules for the synthetic naming scheme model.layers.<idx>.<proj>.lora_<role>.weight
DEFAULT_RULES = [
    {
        "pattern": r"model\.layers\.(?P<idx>\d+)\.(?P<proj>[a-z_]+)\.lora_A\.weight",
        "role": "A",
        "adapter": "{proj}",
        "layer": "attn.{idx}",
    },
    {
        "pattern": r"model\.layers\.(?P<idx>\d+)\.(?P<proj>[a-z_]+)\.lora_B\.weight",
        "role": "B",
        "adapter": "{proj}",
        "layer": "attn.{idx}",
    },
]


def tensor_name(proj, role, idx=0):
    return f"model.layers.{idx}.{proj}.lora_{role}.weight"


def adapter_pair(rng, m, n, r, dtype=np.float32):
    A = rng.standard_normal((r, n)).astype(dtype)
    B = rng.standard_normal((m, r)).astype(dtype)
    return A, B


def write_checkpoint(path, tensors):
    save_file(dict(tensors), str(path))
    return str(path)


def write_bf16_checkpoint(path, names, shape=(2, 2)):
    """Handcraft a file holding bf16 tensors, which numpy cannot represent."""
    count = int(np.prod(shape))
    header = {}
    offset = 0
    for name in names:
        header[name] = {
            "dtype": "BF16",
            "shape": list(shape),
            "data_offsets": [offset, offset + 2 * count],
        }
        offset += 2 * count
    raw = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        fh.write(b"\x80\x3f" * count * len(names))
    return str(path)


def write_rules(path, rules=DEFAULT_RULES):
    path.write_text(json.dumps({"rules": rules}))
    return str(path)


def read_blob(store_dir, rel, rows, cols):
    data = (store_dir / rel).read_bytes()
    return np.frombuffer(data, dtype="<f4").reshape(rows, cols)
