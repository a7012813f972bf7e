"""Soft check: on the default biased world the AUMM-minimizing temperature
lies in [0.05, 0.3]. Runs through the real tau_ablation sweep."""
import numpy as np

from cidbench.runner import parse_config, tau_ablation
from test_acceptance import DESK_TRAIN

TAUS = [0.01, 0.05, 0.1, 0.2, 0.3, 0.5, 0.9]


def test_tau_argmin_in_range(tmp_path, verdict):
    cfg = parse_config({
        "data": {"world": {}},
        "bias": {"spec": "FPMN", "p": 90},
        "train": dict(DESK_TRAIN),
        "metrics": {"radius_count": 3},
        "seeds": [1, 2, 3, 4, 5],
        "out": str(tmp_path),
    })
    res = tau_ablation(cfg, TAUS)
    curve = [res.cells[k]["mean"]["aumm"] for k in res.cells]
    best = TAUS[int(np.argmin(curve))]
    ok = 0.05 <= best <= 0.3
    verdict("soft: tau ablation argmin", ok,
            f"AUMM by tau {dict(zip(TAUS, [round(c, 4) for c in curve]))}; argmin {best} (want [0.05, 0.3])")
    assert (tmp_path / "tau_curve.csv").read_text().count("\n") == len(TAUS) + 1
    assert ok
