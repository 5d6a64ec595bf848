"""File export for run summaries and coverage reports."""
from __future__ import annotations

import csv
import io
import json
import math
import os

from ..certificates import QuadraticLyapunov, barrier_envelope, certificate_from_json, decay_envelope
from ..dynamics import BenchmarkSystem
from .experiment import ControllerResult, CoverageReport, RunSummary


def _fmt(v) -> str:
    return format(float(v), ".17g")


def _write(path: str, text: str) -> str:
    with open(path, "w", newline="") as fh:
        fh.write(text)
    return path


def _envelope(cert, times, v0, r_bar):
    r = r_bar or 0.0
    if isinstance(cert, QuadraticLyapunov):
        return decay_envelope(times, v0, cert.c3, r)
    return barrier_envelope(times, v0, cert.gamma, r)


def trajectory_csv(summary: RunSummary, result: ControllerResult) -> str:
    """Rows ``traj_id,t,x*,u*,V_or_h,envelope,pass``; header only when there are no rollouts."""
    system = BenchmarkSystem(summary.config["system"], summary.config.get("system_params", {}))
    n, m = system.n, system.m
    header = ["traj_id", "t"] + [f"x{i + 1}" for i in range(n)] + [f"u{i + 1}" for i in range(m)]
    header += ["V_or_h", "envelope", "pass"]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    cert = certificate_from_json(json.dumps(summary.certificate))
    for rec, traj in zip(result.records, result.trajectories):
        if len(traj) == 0:
            continue
        vals = cert.value(traj.states)
        env = _envelope(cert, traj.times, vals[0], result.r_bar)
        flag = int(rec.passed)
        for k in range(len(traj)):
            row = [rec.traj_id, _fmt(traj.times[k])]
            row += [_fmt(v) for v in traj.states[k]] + [_fmt(v) for v in traj.controls[k]]
            row += [_fmt(vals[k]), _fmt(env[k]), flag]
            writer.writerow(row)
    return buf.getvalue()


def plot_data_csv(summary: RunSummary) -> str:
    """Certificate value against its envelope over time, for every controller."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["controller", "traj_id", "t", "value", "envelope"])
    cert = certificate_from_json(json.dumps(summary.certificate))
    for name, result in sorted(summary.results.items()):
        for rec, traj in zip(result.records, result.trajectories):
            if len(traj) == 0:
                continue
            vals = cert.value(traj.states)
            env = _envelope(cert, traj.times, vals[0], result.r_bar)
            for t, v, e in zip(traj.times, vals, env):
                writer.writerow([name, rec.traj_id, _fmt(t), _fmt(v), _fmt(e)])
    return buf.getvalue()


def coverage_csv(report: CoverageReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["seed", "q", "coverage", "inside"])
    for row in report.per_seed:
        writer.writerow([row["seed"], row["q"] if isinstance(row["q"], str) else _fmt(row["q"]), _fmt(row["coverage"]), int(row["inside"])])
    return buf.getvalue()


def export(obj, out_dir: str) -> list[str]:
    """Write a RunSummary or CoverageReport to ``out_dir``; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    if isinstance(obj, CoverageReport):
        return [
            _write(os.path.join(out_dir, "coverage.json"), obj.to_json()),
            _write(os.path.join(out_dir, "coverage.csv"), coverage_csv(obj)),
        ]
    if not isinstance(obj, RunSummary):
        raise TypeError(f"cannot export {type(obj).__name__}")
    paths = [_write(os.path.join(out_dir, "summary.json"), obj.to_json())]
    for name, result in sorted(obj.results.items()):
        paths.append(_write(os.path.join(out_dir, f"trajectories_{name}.csv"), trajectory_csv(obj, result)))
    paths.append(_write(os.path.join(out_dir, "plot_data.csv"), plot_data_csv(obj)))
    return paths


def paired_report(summary: RunSummary) -> str:
    """Plain-text CR versus baseline comparison."""
    lines = [f"system {summary.config['system']}  seed {summary.config['seed']}  q {summary.calibration['q']}"]
    for name in (summary.controller, summary.baseline):
        res = summary.results[name]
        r_bar = "" if res.r_bar is None else f"  r_bar {res.r_bar:.4g}"
        lines.append(
            f"  {name:<18} pass {res.pass_fraction:.3f}  ({sum(r.passed for r in res.records)}/{len(res.records)})"
            f"  infeasible {res.infeasible_count}{r_bar}"
        )
        headings = [r.max_abs_heading for r in res.records if r.max_abs_heading is not None]
        if headings:
            held = sum(h < math.pi / 2 for h in headings)
            lines.append(f"  {'':<18} heading |theta| < pi/2 held on {held}/{len(headings)} (monitored only)")
    cr, base = summary.results[summary.controller], summary.results[summary.baseline]
    verdict = "yes" if cr.pass_fraction >= base.pass_fraction else "NO"
    lines.append(f"  CR >= baseline: {verdict}")
    return "\n".join(lines)
