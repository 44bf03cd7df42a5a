"""Experiment orchestration: configs, artifact pipeline, reports, sweeps.

Every stage reads/writes versioned artifacts in an output directory and
records a manifest with content hashes of its inputs and outputs, so any
stage can be rerun and checked for exact reproduction. All randomness
derives from one experiment seed through named substreams.
"""

import copy
import json
import math
import os

import numpy as np

from . import data as data_mod
from . import io as io_mod
from .alignment import align_networks, BlockPermutation
from .attacks import PGDConfig, adversarial_train, robust_curve_report, train_robust_curve
from .bounds import compute_bounds
from .curves import (
    CurveTrainConfig,
    default_grid,
    evaluate_curve,
    init_linear,
    plane_grid,
)
from .nets import Network, NetworkSpec, TrainConfig, init_network, train_sgd
from .pam import PamConfig, run_pam
from .rng import substream

CURVE_MODES = ("unaligned", "aligned", "pam-unaligned", "pam-aligned")


class ConfigError(ValueError):
    pass


class MissingArtifactError(FileNotFoundError):
    pass


DEFAULT_CONFIG = {
    "seed": 0,
    "dataset": {
        "kind": "spirals",
        "n": 1500,
        "noise": 0.08,
        "val_fraction": 0.3,
        "alignment_fraction": 0.2,
    },
    "network": {"layer_widths": [2, 32, 32, 32, 32, 3], "activation": "relu",
                "has_bias": True},
    "trainer": {"lr": 0.1, "lr_decay_every": 20, "lr_decay_factor": 0.5,
                "weight_decay": 5e-4, "epochs": 100, "batch_size": 128,
                "momentum": 0.9},
    "alignment": {"variant": "corr_post"},
    "curve": {"lr": 0.01, "lr_decay_every": 20, "lr_decay_factor": 0.5,
              "epochs": 60, "batch_size": 128, "momentum": 0.9},
    "pam": {"nu_P": 1.0, "nu_phi": 1.0, "perm_epochs": 5, "curve_epochs": 60,
            "proj_iters": 20, "bvn_truncate": 10, "n_samples": 32,
            "outer_iters": 1, "selection_batch": 2048, "perm_lr": 0.05,
            "phi_lr": 0.01, "batch_size": 128, "scoring_t_points": 9},
    "robust": {"epsilon_scale": 0.1, "n_steps": 10, "random_start": True},
    "eval": {"t_points": 21},
}


def default_config():
    return copy.deepcopy(DEFAULT_CONFIG)


def load_config(path, overrides=()):
    try:
        with open(path, "r", encoding="utf-8") as f:
            cfg = json.load(f)
    except FileNotFoundError:
        raise MissingArtifactError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}")
    merged = default_config()
    _deep_update(merged, cfg)
    apply_overrides(merged, overrides)
    validate_config(merged)
    return merged


def _deep_update(base, extra):
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _deep_update(base[k], v)
        else:
            base[k] = v


def apply_overrides(cfg, overrides):
    """Apply dotted-path `k=v` overrides; values parse as JSON literals
    with a plain-string fallback."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"override path {key!r} does not exist in the config")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"override path {key!r} does not exist in the config")
        node[parts[-1]] = value


def validate_config(cfg):
    try:
        NetworkSpec(
            layer_widths=tuple(cfg["network"]["layer_widths"]),
            activation=cfg["network"].get("activation", "relu"),
            huber_delta=cfg["network"].get("huber_delta"),
            residual_period=cfg["network"].get("residual_period"),
            has_bias=cfg["network"].get("has_bias", True),
        )
        ds = cfg["dataset"]
        if "path" not in ds and ds.get("kind") not in data_mod.GENERATORS:
            raise ValueError(f"dataset needs a csv 'path' or a kind in "
                             f"{sorted(data_mod.GENERATORS)}")
        TrainConfig(**{**cfg["trainer"], "seed": 0})
        CurveTrainConfig(**{**cfg["curve"], "seed": 0})
        PamConfig(**{**cfg["pam"], "seed": 0})
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"invalid config: {e}")


def config_hash(cfg):
    import hashlib

    return hashlib.sha256(
        json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()


def derived_seed(seed, name):
    return int(substream(seed, name).integers(0, 2**63))


def spec_from_config(cfg) -> NetworkSpec:
    n = cfg["network"]
    return NetworkSpec(
        layer_widths=tuple(n["layer_widths"]),
        activation=n.get("activation", "relu"),
        huber_delta=n.get("huber_delta"),
        residual_period=n.get("residual_period"),
        has_bias=n.get("has_bias", True),
    )


def pgd_from_config(cfg, dataset) -> PGDConfig:
    r = cfg["robust"]
    eps = r["epsilon_scale"] * dataset.feature_range()
    return PGDConfig(
        epsilon=eps,
        step_size=eps / 4.0 if eps > 0 else 1e-3,
        n_steps=r.get("n_steps", 10),
        random_start=r.get("random_start", True),
        clip_range=tuple(r["clip_range"]) if r.get("clip_range") else None,
    )


# ---------------------------------------------------------------------------
# pipeline stages (library API; the CLI wraps these)


def _require(path):
    if not os.path.exists(path):
        raise MissingArtifactError(f"required artifact missing: {path}")
    return path


def stage_gen_data(cfg, out):
    os.makedirs(out, exist_ok=True)
    ds_cfg = cfg["dataset"]
    dataset = build_dataset(cfg)
    path = os.path.join(out, "dataset.csv")
    data_mod.save_csv(dataset, path)
    io_mod.write_manifest(
        path + ".manifest.json", "gen-data", config_hash(cfg), cfg["seed"], [], ["dataset.csv"]
    )
    return path


def build_dataset(cfg):
    ds_cfg = cfg["dataset"]
    if "path" in ds_cfg:
        return data_mod.load_csv(
            _require(ds_cfg["path"]),
            seed=cfg["seed"],
            val_fraction=ds_cfg.get("val_fraction", 0.3),
            alignment_fraction=ds_cfg.get("alignment_fraction", 0.2),
        )
    kwargs = {k: v for k, v in ds_cfg.items() if k != "kind"}
    return data_mod.generate(ds_cfg["kind"], seed=cfg["seed"], **kwargs)


def load_dataset(cfg, out):
    path = os.path.join(out, "dataset.csv")
    if os.path.exists(path):
        ds_cfg = cfg["dataset"]
        return data_mod.load_csv(
            path,
            seed=cfg["seed"],
            val_fraction=ds_cfg.get("val_fraction", 0.3),
            alignment_fraction=ds_cfg.get("alignment_fraction", 0.2),
        )
    return build_dataset(cfg)


def stage_train(cfg, out, tag, robust=False):
    os.makedirs(out, exist_ok=True)
    dataset = load_dataset(cfg, out)
    spec = spec_from_config(cfg)
    init_rng = substream(cfg["seed"], f"init-{tag}")
    net = init_network(spec, init_rng)
    tcfg = TrainConfig(**{**cfg["trainer"], "seed": derived_seed(cfg["seed"], f"train-{tag}")})
    if robust:
        attack = pgd_from_config(cfg, dataset)
        trained, log = adversarial_train(
            net, dataset, tcfg, attack, attack_seed=derived_seed(cfg["seed"], "attack")
        )
    else:
        trained, log = train_sgd(net, dataset, tcfg)
    name = f"model_{tag}.json"
    path = os.path.join(out, name)
    io_mod.save_model(trained, path)
    inputs = ["dataset.csv"] if os.path.exists(os.path.join(out, "dataset.csv")) else []
    io_mod.write_manifest(
        path + ".manifest.json", f"train:{tag}" + (":robust" if robust else ""),
        config_hash(cfg), cfg["seed"], inputs, [name],
    )
    return path, log


def stage_align(cfg, out, tag1="a", tag2="b", variant=None):
    dataset = load_dataset(cfg, out)
    variant = variant or cfg["alignment"].get("variant", "corr_post")
    m1 = _require(os.path.join(out, f"model_{tag1}.json"))
    m2 = _require(os.path.join(out, f"model_{tag2}.json"))
    net1, net2 = io_mod.load_model(m1), io_mod.load_model(m2)
    bp, _, costs = align_networks(net1, net2, dataset, variant=variant)
    name = f"perm_{variant}.json"
    path = os.path.join(out, name)
    io_mod.save_permutation(bp, path, variant, costs)
    io_mod.write_manifest(
        path + ".manifest.json", f"align:{variant}", config_hash(cfg), cfg["seed"],
        ["dataset.csv", f"model_{tag1}.json", f"model_{tag2}.json"], [name],
    )
    return path


def stage_curve(cfg, out, mode, robust=False):
    if mode not in CURVE_MODES:
        raise ConfigError(f"unknown curve mode {mode!r}; choose from {CURVE_MODES}")
    dataset = load_dataset(cfg, out)
    net1 = io_mod.load_model(_require(os.path.join(out, "model_a.json")))
    net2 = io_mod.load_model(_require(os.path.join(out, "model_b.json")))
    variant = cfg["alignment"].get("variant", "corr_post")
    attack = pgd_from_config(cfg, dataset) if robust else None
    attack_seed = derived_seed(cfg["seed"], "attack")
    inputs = ["dataset.csv", "model_a.json", "model_b.json"]
    perm_ref = None

    bp = None
    if mode in ("aligned", "pam-aligned"):
        perm_path = os.path.join(out, f"perm_{variant}.json")
        if not os.path.exists(perm_path):
            stage_align(cfg, out, variant=variant)
        bp, _ = io_mod.load_permutation(perm_path)
        perm_ref = os.path.basename(perm_path)
        inputs.append(perm_ref)

    slug = mode.replace("-", "_")
    pam_log = None
    if mode.startswith("pam"):
        pcfg = PamConfig(**{**cfg["pam"], "seed": derived_seed(cfg["seed"], f"pam-{mode}"),
                            "loss_kind": "cross_entropy"})
        P0 = bp if bp is not None else BlockPermutation.identity(net1.spec)
        curve, P_final, pam_log = run_pam(net1, net2, P0, dataset, pcfg)
    else:
        theta2 = net2
        if bp is not None:
            from .alignment import apply_block_permutation

            theta2 = apply_block_permutation(net2, bp)
        curve = init_linear(net1, theta2)
        ccfg = CurveTrainConfig(
            **{**cfg["curve"], "seed": derived_seed(cfg["seed"], f"curve-{mode}")}
        )
        if robust:
            curve, _ = train_robust_curve(curve, dataset, ccfg, attack, attack_seed)
        else:
            from .curves import train_curve

            curve, _ = train_curve(curve, dataset, ccfg)

    curve_name = f"curve_{slug}.json"
    io_mod.save_curve(curve, os.path.join(out, curve_name), "model_a.json", "model_b.json",
                      permutation_ref=perm_ref)
    grid = default_grid(cfg["eval"].get("t_points", 21))
    outputs = [curve_name]
    if robust:
        clean, rob = robust_curve_report(curve, dataset, grid, attack, attack_seed)
        metrics_name = f"robust_metrics_{slug}.csv"
        io_mod.save_robust_metrics_csv(clean, rob, os.path.join(out, metrics_name))
    else:
        metrics = evaluate_curve(curve, dataset, grid)
        metrics_name = f"metrics_{slug}.csv"
        io_mod.save_curve_metrics_csv(metrics, os.path.join(out, metrics_name))
    outputs.append(metrics_name)
    if pam_log is not None:
        log_name = f"pam_log_{slug}.jsonl"
        io_mod.save_pam_log(pam_log, os.path.join(out, log_name))
        outputs.append(log_name)
    io_mod.write_manifest(
        os.path.join(out, curve_name + ".manifest.json"),
        f"curve:{mode}" + (":robust" if robust else ""),
        config_hash(cfg), cfg["seed"], inputs, outputs,
    )
    return os.path.join(out, curve_name)


def stage_bounds(cfg, out):
    dataset = load_dataset(cfg, out)
    net1 = io_mod.load_model(_require(os.path.join(out, "model_a.json")))
    net2 = io_mod.load_model(_require(os.path.join(out, "model_b.json")))
    perm_path = os.path.join(out, "perm_l2_pre.json")
    if not os.path.exists(perm_path):
        stage_align(cfg, out, variant="l2_pre")
    bp, _ = io_mod.load_permutation(perm_path)
    report = compute_bounds(net1, net2, bp, dataset,
                            t_grid=default_grid(cfg["eval"].get("t_points", 21)))
    io_mod.save_bound_report(report, os.path.join(out, "bounds.json"),
                             os.path.join(out, "bounds.csv"))
    io_mod.write_manifest(
        os.path.join(out, "bounds.json.manifest.json"), "bounds", config_hash(cfg),
        cfg["seed"], ["dataset.csv", "model_a.json", "model_b.json", "perm_l2_pre.json"],
        ["bounds.json", "bounds.csv"],
    )
    return report


def stage_attack(cfg, out, tag="a"):
    from .attacks import evaluate_robust

    dataset = load_dataset(cfg, out)
    net = io_mod.load_model(_require(os.path.join(out, f"model_{tag}.json")))
    attack = pgd_from_config(cfg, dataset)
    row = evaluate_robust(net, dataset, attack,
                          attack_seed=derived_seed(cfg["seed"], "attack"))
    name = f"attack_{tag}.csv"
    with open(os.path.join(out, name), "w", encoding="utf-8", newline="\n") as f:
        f.write("clean_loss,clean_acc,robust_loss,robust_acc\n")
        f.write(",".join(repr(float(v)) for v in row) + "\n")
    io_mod.write_manifest(
        os.path.join(out, name + ".manifest.json"), f"attack:{tag}", config_hash(cfg),
        cfg["seed"], ["dataset.csv", f"model_{tag}.json"], [name],
    )
    return row


def stage_plane(cfg, out):
    """Plane through theta1, theta2 and the aligned P theta2."""
    from .alignment import apply_block_permutation

    dataset = load_dataset(cfg, out)
    net1 = io_mod.load_model(_require(os.path.join(out, "model_a.json")))
    net2 = io_mod.load_model(_require(os.path.join(out, "model_b.json")))
    variant = cfg["alignment"].get("variant", "corr_post")
    perm_path = os.path.join(out, f"perm_{variant}.json")
    if not os.path.exists(perm_path):
        stage_align(cfg, out, variant=variant)
    bp, _ = io_mod.load_permutation(perm_path)
    theta3 = apply_block_permutation(net2, bp)
    grid = plane_grid(net1, net2, theta3, dataset,
                      resolution=cfg["eval"].get("plane_resolution", 21))
    io_mod.save_plane_csv(grid, os.path.join(out, "plane.csv"))
    io_mod.write_manifest(
        os.path.join(out, "plane.csv.manifest.json"), "plane", config_hash(cfg),
        cfg["seed"], ["dataset.csv", "model_a.json", "model_b.json",
                      os.path.basename(perm_path)], ["plane.csv"],
    )
    return grid


# ---------------------------------------------------------------------------
# aggregation


def read_metrics_csv(path):
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().strip().split(",")
        for line in f:
            rows.append([float(v) for v in line.strip().split(",")])
    arr = np.array(rows)
    return {h: arr[:, i] for i, h in enumerate(header)}


def summarize_pair_dir(pair_dir, robust=False):
    """mode -> {mean_acc, min_acc, max_barrier} from a pair's metric files."""
    out = {}
    for mode in CURVE_MODES:
        slug = mode.replace("-", "_")
        name = (f"robust_metrics_{slug}.csv" if robust else f"metrics_{slug}.csv")
        path = os.path.join(pair_dir, name)
        if not os.path.exists(path):
            continue
        m = read_metrics_csv(path)
        acc = m["robust_acc"] if robust else m["accuracy"]
        losses = m["robust_loss"] if robust else m["loss"]
        t = m["t"]
        baseline = (1 - t) * losses[0] + t * losses[-1]
        out[mode] = {
            "mean_acc": float(acc.mean()),
            "min_acc": float(acc.min()),
            "max_barrier": float(np.max(losses - baseline)),
        }
    return out


def stage_report(root, pairing="tables", robust=False):
    """Aggregate per-pair curve metrics into a summary table.

    pairing="tables": mean +/- std over pair directories (pair*/).
    pairing="figures": raw per-t metrics of the first pair only.
    """
    pair_dirs = sorted(
        os.path.join(root, d) for d in os.listdir(root)
        if d.startswith("pair") and os.path.isdir(os.path.join(root, d))
    )
    if not pair_dirs:
        raise MissingArtifactError(f"no pair directories under {root}")
    path = os.path.join(root, "report.csv")
    if pairing == "figures":
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write("mode,t,loss,accuracy\n")
            for mode in CURVE_MODES:
                slug = mode.replace("-", "_")
                mpath = os.path.join(pair_dirs[0], f"metrics_{slug}.csv")
                if not os.path.exists(mpath):
                    continue
                m = read_metrics_csv(mpath)
                for t, lo, ac in zip(m["t"], m["loss"], m["accuracy"]):
                    f.write(f"{mode},{t!r},{lo!r},{ac!r}\n")
        return path
    table = {}
    for mode in CURVE_MODES:
        rows = []
        for d in pair_dirs:
            summary = summarize_pair_dir(d, robust=robust)
            if mode in summary:
                rows.append(summary[mode])
        if rows:
            table[mode] = {
                "n_pairs": len(rows),
                "mean_acc_mean": float(np.mean([r["mean_acc"] for r in rows])),
                "mean_acc_std": float(np.std([r["mean_acc"] for r in rows])),
                "min_acc_mean": float(np.mean([r["min_acc"] for r in rows])),
                "min_acc_std": float(np.std([r["min_acc"] for r in rows])),
            }
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("mode,n_pairs,mean_acc_mean,mean_acc_std,min_acc_mean,min_acc_std\n")
        for mode, row in table.items():
            f.write(
                f"{mode},{row['n_pairs']},{row['mean_acc_mean']!r},{row['mean_acc_std']!r},"
                f"{row['min_acc_mean']!r},{row['min_acc_std']!r}\n"
            )
    return path


def run_pair(cfg, pair_dir, modes=("unaligned", "aligned"), robust=False):
    """Full pipeline for one endpoint pair in its own directory."""
    os.makedirs(pair_dir, exist_ok=True)
    stage_gen_data(cfg, pair_dir)
    stage_train(cfg, pair_dir, "a", robust=robust)
    stage_train(cfg, pair_dir, "b", robust=robust)
    stage_align(cfg, pair_dir)
    for mode in modes:
        stage_curve(cfg, pair_dir, mode, robust=robust)
    return summarize_pair_dir(pair_dir, robust=robust)


def stage_sweep(cfg, out, lrs=None, batch_sizes=None, n_pairs=1,
                modes=("unaligned", "aligned")):
    """Grid over curve learning rates and batch sizes; one row per
    (cell, mode) with accuracies aggregated over pairs."""
    lrs = lrs or cfg.get("sweep", {}).get("lrs", [0.01, 0.1, 0.5])
    batch_sizes = batch_sizes or cfg.get("sweep", {}).get("batch_sizes", [64, 128, 256])
    os.makedirs(out, exist_ok=True)
    rows = []
    for lr in lrs:
        for bs in batch_sizes:
            cell = copy.deepcopy(cfg)
            cell["curve"]["lr"] = lr
            cell["curve"]["batch_size"] = bs
            for p in range(n_pairs):
                cell_pair = copy.deepcopy(cell)
                cell_pair["seed"] = derived_seed(cfg["seed"], f"sweep-{lr}-{bs}-{p}")
                pair_dir = os.path.join(out, f"cell_lr{lr}_bs{bs}", f"pair{p}")
                summary = run_pair(cell_pair, pair_dir, modes=modes)
                for mode, s in summary.items():
                    rows.append((lr, bs, p, mode, s["mean_acc"], s["min_acc"]))
    path = os.path.join(out, "sweep.csv")
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("lr,batch_size,pair,mode,mean_acc,min_acc\n")
        for r in rows:
            f.write(",".join(_fmt(v) for v in r) + "\n")
    return path


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else str(v)


# ---------------------------------------------------------------------------
# statistics


def sign_test_p(wins, losses):
    """One-sided exact binomial sign test: probability of >= wins
    successes in wins+losses fair coin flips (ties excluded upstream)."""
    n = wins + losses
    if n == 0:
        return 1.0
    return sum(math.comb(n, k) for k in range(wins, n + 1)) / 2.0**n
