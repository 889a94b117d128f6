"""Versioned checkpoint container: magic header followed by an npz payload."""

import io
import json

import numpy as np

from .transformer import ModelConfig, TransformerModel, config_dict

MAGIC = b"POLYTRANS-CKPT v1\n"


def save_checkpoint(path, model: TransformerModel, step=0, optimizer=None, meta=None):
    """Write config, parameters, step counter and optional Adam moments.

    ``optimizer`` is a dict with keys ``m``, ``v`` (name -> array) and ``t``.
    """
    arrays = {
        "config": np.array(json.dumps(config_dict(model.config))),
        "meta": np.array(json.dumps(meta or {})),
        "step": np.array(step, dtype=np.int64),
    }
    for k, v in model.params.items():
        arrays["param/" + k] = v
    if optimizer is not None:
        arrays["adam_t"] = np.array(optimizer["t"], dtype=np.int64)
        for k, v in optimizer["m"].items():
            arrays["adam_m/" + k] = v
        for k, v in optimizer["v"].items():
            arrays["adam_v/" + k] = v
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Returns ``(model, step, optimizer_or_None, meta)``."""
    with open(path, "rb") as fh:
        head = fh.read(len(MAGIC))
        if head != MAGIC:
            raise ValueError(f"{path}: not a polytrans checkpoint (bad magic header)")
        payload = fh.read()
    with np.load(io.BytesIO(payload), allow_pickle=False) as z:
        config = ModelConfig(**json.loads(str(z["config"])))
        meta = json.loads(str(z["meta"]))
        step = int(z["step"])
        params = {k[len("param/"):]: z[k].copy() for k in z.files if k.startswith("param/")}
        optimizer = None
        if "adam_t" in z.files:
            optimizer = {
                "t": int(z["adam_t"]),
                "m": {k[len("adam_m/"):]: z[k].copy() for k in z.files if k.startswith("adam_m/")},
                "v": {k[len("adam_v/"):]: z[k].copy() for k in z.files if k.startswith("adam_v/")},
            }
    return TransformerModel(config, params), step, optimizer, meta
