"""Matplotlib rendering of sweep results, written next to the CSV output."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

_STYLE = {
    "figure.figsize": (6.0, 4.2),
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 10,
}

_POLICY_LABELS = {
    "optimal_two_stage": "optimal two-stage",
    "subopt_first_stage": "bound-based first stage",
    "subopt_second_stage": "proportional second stage",
    "large_r_approx": "large-r first stage",
    "nonadaptive": "non-adaptive",
    "oracle": "oracle",
}


def render_gain_figure(rows, path) -> Path:
    """Gain versus r (dB) for every policy in the rows, plus the analytic bound."""
    path = Path(path)
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        policies = []
        for row in rows:
            if row.policy not in policies:
                policies.append(row.policy)
        for policy in policies:
            pts = sorted((r.r_db, r.gain_db) for r in rows if r.policy == policy)
            ax.plot([x for x, _ in pts], [y for _, y in pts], marker="o", ms=3,
                    label=_POLICY_LABELS.get(policy, policy))
        bound_pts = sorted({(r.r_db, r.bound_gain_db) for r in rows})
        ax.plot([x for x, _ in bound_pts], [y for _, y in bound_pts], "k--",
                label="gain lower bound")
        first = rows[0]
        ax.set_xlabel("r (dB)")
        ax.set_ylabel("gain over non-adaptive sensing (dB)")
        ax.set_title(f"p={first.p:g}, q={first.q:g}, s={first.s:g}, N trials={first.trials}")
        ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(path, dpi=150)
        plt.close(fig)
    return path


def render_lambda_csv(csv_path, out_dir) -> list:
    """First-stage fraction comparison figures, one per (p, q) in the CSV."""
    csv_path = Path(csv_path)
    out_dir = Path(out_dir)
    groups = {}
    with open(csv_path, newline="") as fh:
        for rec in csv.DictReader(fh):
            key = (float(rec["p"]), float(rec["q"]))
            groups.setdefault(key, []).append(rec)
    written = []
    for (p, q), recs in groups.items():
        recs.sort(key=lambda rec: float(rec["r_db"]))
        r_db = [float(rec["r_db"]) for rec in recs]
        with plt.rc_context(_STYLE):
            fig, ax = plt.subplots()
            for col, mark, label in [
                ("lambda_exact", "o-", "Monte Carlo sweep"),
                ("lambda_bound", "s-", "bound-based"),
                ("lambda_asymptotic", "^--", "large-r closed form"),
            ]:
                und_col = {"lambda_exact": "exact_undetermined",
                           "lambda_bound": "bound_undetermined"}.get(col)
                xs, ys = [], []
                for rec, x in zip(recs, r_db):
                    if und_col and rec.get(und_col) == "true":
                        continue
                    val = float(rec[col])
                    if val > 0:
                        xs.append(x)
                        ys.append(val)
                ax.semilogy(xs, ys, mark, ms=3, label=label)
            ax.set_xlabel("r (dB)")
            ax.set_ylabel("first-stage budget fraction")
            ax.set_title(f"p={p:g}, q={q:g}")
            ax.legend(fontsize=8)
            fig.tight_layout()
            out = out_dir / f"lambda_p{p:g}_q{q:g}.png"
            fig.savefig(out, dpi=150)
            plt.close(fig)
            written.append(out)
    return written


def render_bounds_csv(csv_path, out_path) -> Path:
    """Gain-bound curve from a bounds-command CSV."""
    csv_path = Path(csv_path)
    out_path = Path(out_path)
    r_db, gain_db, lam = [], [], []
    with open(csv_path, newline="") as fh:
        for rec in csv.DictReader(fh):
            r_db.append(float(rec["r_db"]))
            gain_db.append(float(rec["gain_bound_db"]))
            lam.append(float(rec["lambda_star"]))
    with plt.rc_context(_STYLE):
        fig, (ax1, ax2) = plt.subplots(2, 1, sharex=True, figsize=(6.0, 5.6))
        ax1.plot(r_db, gain_db, "k-")
        ax1.set_ylabel("gain lower bound (dB)")
        ax2.plot(r_db, lam, "b-")
        ax2.set_ylabel("maximizing fraction")
        ax2.set_xlabel("r (dB)")
        fig.tight_layout()
        fig.savefig(out_path, dpi=150)
        plt.close(fig)
    return out_path
