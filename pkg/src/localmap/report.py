"""Run reports: per-stage timing statistics, skip/drop counts, transfer
ledger totals, ATE, and paired baseline/optimized comparisons with a text
table mirroring the usual per-stage benchmark layout."""

from __future__ import annotations

import hashlib
import json

import numpy as np

from .errors import InvalidArgumentError
from .pipeline import RunResult, StageTimings
from .trajectory import ate_rmse

REPORT_KIND = "localmap-run-report"
COMPARE_KIND = "localmap-comparison"

STAGES = [
    ("upload", "upload_ms"),
    ("recent_mp_cull", "recent_mp_cull_ms"),
    ("triangulation", "triangulation_ms"),
    ("fusion", "fusion_ms"),
    ("lba", "lba_ms"),
    ("kf_cull", "kf_cull_ms"),
]


def _stats(values: list[float]) -> dict:
    if not values:
        return {"mean_ms": 0.0, "std_ms": 0.0, "min_ms": 0.0, "max_ms": 0.0, "count": 0}
    arr = np.asarray(values)
    return {
        "mean_ms": float(arr.mean()),
        "std_ms": float(arr.std()),
        "min_ms": float(arr.min()),
        "max_ms": float(arr.max()),
        "count": int(arr.size),
    }


def file_sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def summarize_runs(
    results: list[RunResult],
    sequence_path: str | None = None,
    sequence_sha256: str | None = None,
    ate: float | None = None,
    ate_poses: int | None = None,
) -> dict:
    """Aggregate one or more repeats of the same configuration into a report."""
    if not results:
        raise InvalidArgumentError("no runs to summarize")
    first = results[0]
    cfg = first.config
    all_timings: list[StageTimings] = [t for r in results for t in r.timings]
    stages = {
        name: _stats([getattr(t, field) for t in all_timings]) for name, field in STAGES
    }
    stages["total"] = _stats([t.total_ms for t in all_timings])
    ba_iters = sum(rep.iterations for r in results for rep in r.ba_reports)
    final_costs = [rep.final_cost for r in results for rep in r.ba_reports]
    report = {
        "kind": REPORT_KIND,
        "version": 1,
        "sequence": {
            "path": sequence_path,
            "sha256": sequence_sha256,
            "keyframes_processed": len(first.timings),
        },
        "pipeline": {
            "mode": cfg.mode,
            "worker_count": cfg.worker_count,
            "queue_capacity": cfg.queue_capacity,
            "stress": cfg.stress,
            "min_kf_interval_frames": cfg.min_kf_interval_frames,
            "force_skip_lba": cfg.force_skip_lba,
            "force_skip_culling": cfg.force_skip_culling,
            "repeats": len(results),
        },
        "stages": stages,
        "map": {
            "live_keyframes": len(first.model.live_keyframes()),
            "live_points": len(first.model.live_points()),
            "culled_keyframes": len(first.culled_keyframes),
            "culled_recent_points": len(first.culled_points),
            "audit_violations": len(first.audit_violations),
            "fingerprint": first.map_fingerprint(),
        },
        "skips": first.skips.as_dict(),
        "ledger": first.store.ledger.as_dict(),
        "fusion": dict(first.fusion_totals),
        "creation": {
            "created": first.creation_stats.created,
            "conflicts": first.creation_stats.conflicts,
            "degenerate": first.creation_stats.degenerate,
            "gate_failures": dict(first.creation_stats.gate_failures),
        },
        "ba": {
            "runs": sum(len(r.ba_reports) for r in results),
            "total_iterations": ba_iters,
            "mean_final_cost": float(np.mean(final_costs)) if final_costs else 0.0,
            "last_report": first.ba_reports[-1].as_dict() if first.ba_reports else None,
        },
        "timings_per_keyframe": [t.as_dict() for t in first.timings],
    }
    if ate is not None:
        report["ate"] = {"rmse_m": float(ate), "poses": int(ate_poses or 0)}
    return report


def evaluate_ate_against_truth(result: RunResult, seq) -> tuple[float, int]:
    """ATE of the run's live keyframes against the sequence's held-out truth."""
    gt_map = seq.gt_positions()
    ids = [kf.kf_id for kf in sorted(result.model.live_keyframes(), key=lambda k: k.kf_id)]
    ids = [i for i in ids if i in gt_map]
    est = np.stack([result.model.keyframes[i].pose.inverse().trans for i in ids])
    gt = np.stack([gt_map[i] for i in ids])
    return ate_rmse(est, gt), len(ids)


def compare_reports(baseline: dict, optimized: dict) -> dict:
    """Pair a baseline run with an optimized run of the same sequence."""
    for rep, expected_mode in ((baseline, "baseline"), (optimized, "optimized")):
        if rep.get("kind") != REPORT_KIND:
            raise InvalidArgumentError("inputs must be run reports")
        if rep["pipeline"]["mode"] != expected_mode:
            raise InvalidArgumentError(
                f"expected a {expected_mode} report, got {rep['pipeline']['mode']}"
            )
    sb = baseline["sequence"].get("sha256")
    so = optimized["sequence"].get("sha256")
    if sb and so and sb != so:
        raise InvalidArgumentError("reports come from different sequences")
    if baseline["map"]["fingerprint"] != optimized["map"]["fingerprint"]:
        equivalent = False
    else:
        equivalent = True
    stages = {}
    for name in [n for n, _ in STAGES] + ["total"]:
        b = baseline["stages"][name]
        o = optimized["stages"][name]
        stages[name] = {
            "baseline_mean_ms": b["mean_ms"],
            "baseline_std_ms": b["std_ms"],
            "optimized_mean_ms": o["mean_ms"],
            "optimized_std_ms": o["std_ms"],
            "speedup": (b["mean_ms"] / o["mean_ms"]) if o["mean_ms"] > 0 else None,
        }
    out = {
        "kind": COMPARE_KIND,
        "version": 1,
        "sequence": baseline["sequence"],
        "stages": stages,
        "results_bit_identical": equivalent,
        "ate": {
            "baseline": baseline.get("ate"),
            "optimized": optimized.get("ate"),
        },
        "skips": {
            "baseline": baseline["skips"],
            "optimized": optimized["skips"],
        },
        "ledger": {
            "baseline": baseline["ledger"],
            "optimized": optimized["ledger"],
        },
    }
    return out


def format_comparison_table(cmp: dict) -> str:
    rows = []
    header = f"{'Stage':<16}{'Baseline ms':>16}{'Optimized ms':>16}{'Speedup':>10}"
    rows.append(header)
    rows.append("-" * len(header))
    for name, s in cmp["stages"].items():
        b = f"{s['baseline_mean_ms']:.2f}+-{s['baseline_std_ms']:.2f}"
        o = f"{s['optimized_mean_ms']:.2f}+-{s['optimized_std_ms']:.2f}"
        sp = f"{s['speedup']:.2f}x" if s["speedup"] else "-"
        rows.append(f"{name:<16}{b:>16}{o:>16}{sp:>10}")
    ate_b = cmp["ate"]["baseline"]
    ate_o = cmp["ate"]["optimized"]
    if ate_b and ate_o:
        rows.append(
            f"{'ATE (m)':<16}{ate_b['rmse_m']:>16.6f}{ate_o['rmse_m']:>16.6f}{'':>10}"
        )
    rows.append(
        f"results bit-identical: {cmp['results_bit_identical']}"
    )
    return "\n".join(rows)


def format_run_table(report: dict) -> str:
    header = f"{'Stage':<16}{'Mean ms':>12}{'Std ms':>12}{'Max ms':>12}"
    rows = [header, "-" * len(header)]
    for name in [n for n, _ in STAGES] + ["total"]:
        s = report["stages"][name]
        rows.append(
            f"{name:<16}{s['mean_ms']:>12.2f}{s['std_ms']:>12.2f}{s['max_ms']:>12.2f}"
        )
    if "ate" in report:
        rows.append(f"{'ATE (m)':<16}{report['ate']['rmse_m']:>12.6f}")
    sk = report["skips"]
    rows.append(
        f"skips: lba={sk['lba_skips']} culling={sk['culling_skips']} drops={sk['drops']}"
    )
    led = report["ledger"]
    rows.append(
        "ledger: persistent={persistent_bytes_up} naive={naive_bytes_up} "
        "ratio={naive_over_persistent:.2f}".format(**led)
    )
    return "\n".join(rows)


def write_json(obj: dict, path: str):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path: str) -> dict:
    with open(path) as fh:
        return json.load(fh)
