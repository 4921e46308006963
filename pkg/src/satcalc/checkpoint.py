"""Checkpoint directories and key=value config files.

A checkpoint directory holds ``config.txt`` (key=value), ``params.tsv``
(name<TAB>file per parameter group) and one SATC tensor per group.  SATC
stores float32, so float64 models are rounded on save.
"""
import os
import shutil
import tempfile
from dataclasses import fields

import numpy as np

from . import tensorio
from .dataset import TaskId
from .model import ModelConfig, ModelParams
from .train import LossWeights, TrainConfig


def read_kv(path):
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            if not sep:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            out[key.strip()] = val.strip()
    return out


def _parse_bool(text):
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


_MODEL_KEYS = {f.name for f in fields(ModelConfig)}


def configs_from_mapping(mapping):
    """Split one key=value mapping into ``(ModelConfig, TrainConfig)``."""
    model_kv = {k: v for k, v in mapping.items() if k in _MODEL_KEYS}
    train_kw = {}
    weights = dict(LossWeights().weights)
    for key, raw in mapping.items():
        if key in _MODEL_KEYS:
            continue
        if key.startswith("weight."):
            weights[TaskId.parse(key[7:])] = float(raw)
        elif key == "tasks":
            train_kw["tasks"] = tuple(TaskId.parse_list(raw))
        elif key in ("augment", "early_stopping"):
            train_kw[key] = _parse_bool(raw)
        elif key in ("epochs", "batch_size", "plateau_patience", "early_stop_patience", "threads"):
            train_kw[key] = int(raw)
        elif key in ("lr", "beta1", "beta2", "eps", "plateau_factor", "scale_low", "scale_high"):
            train_kw[key] = float(raw)
        else:
            raise ValueError(f"unknown config key {key!r}")
    train_kw["weights"] = LossWeights(weights)
    return ModelConfig.from_mapping(model_kv), TrainConfig(**train_kw)


def _param_file(name):
    return name + ".satc"


def save_checkpoint(directory, params, extra_files=None):
    """Write atomically: build in a sibling temp dir, then swap it into place."""
    directory = os.path.abspath(os.fspath(directory))
    parent = os.path.dirname(directory)
    os.makedirs(parent, exist_ok=True)
    tmp = tempfile.mkdtemp(prefix=".ckpt-", dir=parent)
    try:
        with open(os.path.join(tmp, "config.txt"), "w", encoding="utf-8") as fh:
            fh.write(params.config.to_text())
        groups = {f"backbone.{k}": v for k, v in params.backbone.items()}
        groups.update(params.trainable)
        lines = []
        for name in sorted(groups):
            arr = np.asarray(groups[name])
            tensorio.write_tensor(os.path.join(tmp, _param_file(name)), arr.shape, arr)
            lines.append(f"{name}\t{_param_file(name)}")
        with open(os.path.join(tmp, "params.tsv"), "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
        for fname, text in (extra_files or {}).items():
            with open(os.path.join(tmp, fname), "w", encoding="utf-8") as fh:
                fh.write(text)
        if os.path.isdir(directory):
            shutil.rmtree(directory)
        os.replace(tmp, directory)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def load_checkpoint(directory):
    cfg = ModelConfig.from_mapping(read_kv(os.path.join(directory, "config.txt")))
    dt = cfg.np_dtype
    backbone, trainable = {}, {}
    with open(os.path.join(directory, "params.tsv"), encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            name, fname = line.split("\t")
            arr = tensorio.read_array(os.path.join(directory, fname)).astype(dt)
            if name.startswith("backbone."):
                arr.setflags(write=False)
                backbone[name[len("backbone."):]] = arr
            else:
                trainable[name] = arr
    return ModelParams(cfg, backbone, trainable)
