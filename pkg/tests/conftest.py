"""Shared helpers: a minimal TOML writer and a small run config."""

import copy
import json

import pytest


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    if isinstance(v, str):
        return json.dumps(v)
    return repr(v)


def to_toml(doc: dict, prefix: str = "") -> str:
    """Serialize nested dicts of scalars and lists (enough for run configs)."""
    scalars = [f"{k} = {_toml_value(v)}" for k, v in doc.items() if not isinstance(v, dict)]
    out = ""
    if scalars:
        out += (f"[{prefix}]\n" if prefix else "") + "\n".join(scalars) + "\n\n"
    for k, v in doc.items():
        if isinstance(v, dict):
            out += to_toml(v, f"{prefix}.{k}" if prefix else k)
    return out


SMALL = {
    "seed": 0,
    "data": {
        "dir": "data",
        "attribute": "race",
        "split": [0.7, 0.1, 0.2],
        "generator": {
            "n_samples": 300,
            "image_dim": 8,
            "text_dim": 6,
            "latent_dim": 4,
            "group_attribute": "race",
            "group_proportions": [0.3, 0.3, 0.4],
            "group_shift": [[0.5, 0.0, 0.0, 0.0], [0.0, 0.5, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0]],
            "group_noise_scale": [0.8, 1.2, 1.0],
            "label_signal_strength": 1.5,
            "cross_modal_correlation": 0.7,
            "feature_noise_scale": 0.2,
            "schema": {"race": ["Asian", "Black", "White"], "gender": ["Female", "Male"]},
        },
    },
    "model": {"kind": "linear", "embed_dim": 4, "temperature": 0.1},
    "train": {"mode": "fairclip", "epochs": 2, "batch_size": 16, "learning_rate": 1e-2,
              "checkpoint_every": 1},
    "fair": {"lambda_fair": 1e-3, "group_batch_size": 8, "epsilon": 0.1},
    "probe": {"epochs": 100, "learning_rate": 5e-2},
    "report": {"model": "fairclip"},
}


def small_config(**overrides) -> dict:
    """Deep copy of SMALL with dotted-path overrides, e.g. ``**{"train.epochs": 0}``."""
    doc = copy.deepcopy(SMALL)
    for path, value in overrides.items():
        node = doc
        *parents, leaf = path.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return doc


@pytest.fixture
def write_config(tmp_path):
    def write(name="run.toml", **overrides):
        path = tmp_path / name
        path.write_text(to_toml(small_config(**overrides)))
        return path
    return write


def bias_experiment(cfg, modes=("clip", "fairclip")) -> dict:
    """Train ``cfg`` in each mode with the same seed; return per-mode test gap sum and clip loss.

    The split is train/test per ``cfg.data.split`` (no validation pass).
    """
    import dataclasses

    from fairsinkhorn.cli import split_counts
    from fairsinkhorn.synthetic import generate, measure_group_gap
    from fairsinkhorn.train import mean_clip_loss, train

    ds = generate(cfg.generator_config())
    n_train, n_val, _ = split_counts(len(ds), cfg.data.split)
    train_ds, test_ds = ds.subset(range(n_train)), ds.subset(range(n_train + n_val, len(ds)))
    out = {}
    for mode in modes:
        run = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, mode=mode))
        ck = train(train_ds, run, timestamps=False).checkpoint
        gaps = measure_group_gap(test_ds, ck.image_encoder, ck.text_encoder, cfg.data.attribute,
                                 run.sinkhorn_config())
        loss = mean_clip_loss(test_ds, ck.image_encoder, ck.text_encoder, cfg.train.batch_size,
                              cfg.model.temperature)
        out[mode] = {"gap": sum(gaps.values()), "gaps": gaps, "clip_loss": loss}
    return out
