"""Versioned artifact files: canonical JSON, CSV exports, manifests.

All structured state is JSON with a format_version field, emitted with a
fixed field order and floats at 17 significant digits so reruns are
byte-identical and round-trips are value-exact for finite doubles.
"""

import hashlib
import json
import os

import numpy as np

from .alignment import BlockPermutation
from .curves import BezierCurve, CurveMetrics
from .nets import Network, NetworkSpec

FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# canonical JSON


def _canon(value, out):
    if isinstance(value, dict):
        out.append("{")
        for i, (k, v) in enumerate(value.items()):
            if i:
                out.append(",")
            out.append(json.dumps(str(k)))
            out.append(":")
            _canon(v, out)
        out.append("}")
    elif isinstance(value, (list, tuple)):
        out.append("[")
        for i, v in enumerate(value):
            if i:
                out.append(",")
            _canon(v, out)
        out.append("]")
    elif isinstance(value, bool) or value is None:
        out.append(json.dumps(value))
    elif isinstance(value, (int, np.integer)):
        out.append(str(int(value)))
    elif isinstance(value, (float, np.floating)):
        v = float(value)
        if not np.isfinite(v):
            raise ValueError("cannot serialize non-finite float")
        out.append(format(v, ".17g"))
    elif isinstance(value, str):
        out.append(json.dumps(value, ensure_ascii=False))
    elif isinstance(value, np.ndarray):
        _canon(value.tolist(), out)
    else:
        raise TypeError(f"cannot serialize {type(value)!r}")


def dumps_canonical(obj) -> str:
    """Deterministic JSON text: insertion-ordered fields, 17-significant-
    digit floats, no whitespace."""
    out = []
    _canon(obj, out)
    return "".join(out)


def write_json(obj, path):
    text = dumps_canonical(obj)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text + "\n")


def read_json(path):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# model / permutation / curve files


def model_to_dict(net: Network):
    return {
        "format_version": FORMAT_VERSION,
        "spec": net.spec.to_dict(),
        "weights": [W.tolist() for W in net.weights],
        "biases": None if net.biases is None else [b.tolist() for b in net.biases],
    }


def save_model(net: Network, path):
    write_json(model_to_dict(net), path)


def load_model(path) -> Network:
    d = read_json(path)
    spec = NetworkSpec.from_dict(d["spec"])
    biases = d.get("biases")
    return Network(spec, [np.array(W) for W in d["weights"]],
                   None if biases is None else [np.array(b) for b in biases])


def save_permutation(bp: BlockPermutation, path, variant: str, cost_per_layer=None):
    write_json(
        {
            "format_version": FORMAT_VERSION,
            "layer_perms": [p.tolist() for p in bp.perms],
            "variant": variant,
            "cost_per_layer": cost_per_layer,
        },
        path,
    )


def load_permutation(path):
    d = read_json(path)
    return BlockPermutation([np.array(p) for p in d["layer_perms"]]), d


def save_curve(curve: BezierCurve, path, theta1_ref: str, theta2_ref: str,
               permutation_ref: str = None):
    write_json(
        {
            "format_version": FORMAT_VERSION,
            "spec": curve.spec.to_dict(),
            "theta1_ref": theta1_ref,
            "theta2_ref": theta2_ref,
            "control_weights": [W.tolist() for W in curve.control.weights],
            "control_biases": (
                None if curve.control.biases is None
                else [b.tolist() for b in curve.control.biases]
            ),
            "permutation_ref": permutation_ref,
        },
        path,
    )


def load_curve(path, theta1: Network, theta2: Network) -> BezierCurve:
    d = read_json(path)
    spec = NetworkSpec.from_dict(d["spec"])
    biases = d.get("control_biases")
    control = Network(spec, [np.array(W) for W in d["control_weights"]],
                      None if biases is None else [np.array(b) for b in biases])
    return BezierCurve(theta1, theta2, control)


# ---------------------------------------------------------------------------
# CSV exports


def _write_rows(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(_cell(v) for v in row) + "\n")


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def save_curve_metrics_csv(metrics: CurveMetrics, path):
    _write_rows(path, ["t", "loss", "accuracy"],
                zip(metrics.t_grid, metrics.loss, metrics.accuracy))


def save_robust_metrics_csv(clean: CurveMetrics, robust: CurveMetrics, path):
    _write_rows(
        path,
        ["t", "clean_loss", "clean_acc", "robust_loss", "robust_acc"],
        zip(clean.t_grid, clean.loss, clean.accuracy, robust.loss, robust.accuracy),
    )


def save_plane_csv(grid, path):
    rows = []
    for iv, v in enumerate(grid.v):
        for iu, u in enumerate(grid.u):
            rows.append((u, v, grid.loss[iv, iu], grid.accuracy[iv, iu]))
    _write_rows(path, ["u", "v", "loss", "accuracy"], rows)


def save_bound_report(report, json_path, csv_path=None):
    d = {
        "format_version": FORMAT_VERSION,
        "t_grid": report.t_grid.tolist(),
        "base_dist_u": report.base_dist_u.tolist(),
        "base_dist_a": report.base_dist_a.tolist(),
        "B_u_t": report.B_u_t.tolist(),
        "B_a_t": report.B_a_t.tolist(),
        "B_u": report.B_u,
        "B_a": report.B_a,
        "B_u_epsmax": report.B_u_epsmax,
        "B_a_epsmax": report.B_a_epsmax,
        "realized_loss_u": report.realized_loss_u.tolist(),
        "realized_loss_a": report.realized_loss_a.tolist(),
        "constants": report.constants,
    }
    write_json(d, json_path)
    if csv_path:
        _write_rows(csv_path, ["t", "B_u", "B_a", "loss_u", "loss_a"], report.rows())


def save_pam_log(log, path):
    """JSON-lines, one record per half-step."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for rec in log:
            f.write(dumps_canonical(rec) + "\n")


# ---------------------------------------------------------------------------
# manifests


def write_manifest(path, command, config_hash, seed, inputs, outputs):
    """Record what produced an artifact: input/output content hashes keyed
    by path relative to the manifest's directory."""
    base = os.path.dirname(os.path.abspath(path))
    write_json(
        {
            "format_version": FORMAT_VERSION,
            "command": command,
            "config_hash": config_hash,
            "seed": seed,
            "inputs": {rel: sha256_file(os.path.join(base, rel)) for rel in sorted(inputs)},
            "outputs": {rel: sha256_file(os.path.join(base, rel)) for rel in sorted(outputs)},
        },
        path,
    )


class ManifestError(RuntimeError):
    pass


def verify_manifest(path):
    """Check that every referenced artifact exists and hashes match."""
    d = read_json(path)
    base = os.path.dirname(os.path.abspath(path))
    for section in ("inputs", "outputs"):
        for rel, digest in d.get(section, {}).items():
            full = os.path.join(base, rel)
            if not os.path.exists(full):
                raise ManifestError(f"{path}: missing {section[:-1]} artifact {rel}")
            actual = sha256_file(full)
            if actual != digest:
                raise ManifestError(
                    f"{path}: hash mismatch for {rel}: manifest {digest[:12]}.., "
                    f"file {actual[:12]}.."
                )
    return d
