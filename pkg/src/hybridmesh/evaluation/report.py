"""Per-subject evaluation tables: vertex errors, mask metrics on the SAX grid,
clinical indices and (for volumetric meshes) element quality."""
from __future__ import annotations

import csv
import json
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from ..mesh.topology import STRUCTURES, MeshTopology
from .clinical import clinical_indices
from .metrics import dice, hausdorff, mcd, vertex_errors
from .quality import METRICS, histogram, summarize, tetra_quality
from .rasterize import GridSpec, structure_masks

ROW_COLUMNS = ("subject", "phase", "structure", "dice", "hd_mm", "mcd_mm", "mae_mm", "mse_mm2")
# mask structures and the vertex label each one is scored against
MASK_LABEL = {"LV_endo": "LV", "LV_epi": "LV", "LV_myo": "LV", "RV": "RV", "LA": "LA", "RA": "RA"}


def sax_grid(sample) -> GridSpec:
    """Voxel-centre grid of the sample's stored SAX image (axis-aligned)."""
    sax = sample.sax
    if not np.allclose(sax.direction, np.eye(3)):
        raise ValueError("mask evaluation needs an axis-aligned SAX image")
    return GridSpec(tuple(sax.data.shape), tuple(float(s) for s in sax.spacing), tuple(float(o) for o in sax.origin))


def score_sample(pred: np.ndarray, sample, topology: MeshTopology) -> tuple[list[dict], dict, dict]:
    """Rows for one prediction plus its predicted and reference blood-pool masks."""
    gt = sample.gt.coords
    grid = sax_grid(sample)
    n_surface = max(int(topology.faces.max()) + 1, 0)
    pm = structure_masks(pred[:n_surface], topology, grid)
    gm = structure_masks(gt[:n_surface], topology, grid)
    labels = topology.labels
    mae, mse = vertex_errors(pred, gt)
    rows = [dict(subject=sample.subject, phase=sample.phase, structure="all", dice="", hd_mm="", mcd_mm="",
                 mae_mm=mae, mse_mm2=mse)]
    for name in pm:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            d, h, c = dice(pm[name], gm[name]), hausdorff(pm[name], gm[name]), mcd(pm[name], gm[name])
        smae, smse = vertex_errors(pred, gt, labels, MASK_LABEL.get(name, name))
        rows.append(dict(subject=sample.subject, phase=sample.phase, structure=name, dice=d, hd_mm=h, mcd_mm=c,
                         mae_mm=smae, mse_mm2=smse))
    for s in STRUCTURES:
        if np.any(labels == STRUCTURES.index(s)) and s not in pm:
            smae, smse = vertex_errors(pred, gt, labels, s)
            rows.append(dict(subject=sample.subject, phase=sample.phase, structure=s, dice="", hd_mm="", mcd_mm="",
                             mae_mm=smae, mse_mm2=smse))
    return rows, _blood_pools(pm), _blood_pools(gm)


def _blood_pools(masks: dict) -> dict:
    if "LV_endo" in masks and "RV" in masks:
        return {"LV": masks["LV_endo"], "RV": masks["RV"]}
    return {}


def _score(args):
    return score_sample(*args)


def evaluate_predictions(samples, preds, topology: MeshTopology, workers: int = 1) -> dict:
    """Score predictions (mm, one per sample) against each sample's gt.

    Returns ``{"rows", "clinical", "summary", "quality"}``; quality is present
    only when the topology has tetrahedra.
    """
    jobs = [(np.asarray(p, float), s, topology) for p, s in zip(preds, samples)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(min(workers, len(jobs))) as pool:
            scored = list(pool.map(_score, jobs))
    else:
        scored = [_score(j) for j in jobs]
    rows, pooled = [], {}
    for (r, pmask, gmask), s in zip(scored, samples):
        rows.extend(r)
        pooled[(s.subject, s.phase)] = (pmask, gmask)
    clinical = []
    for subj in sorted({s.subject for s in samples}):
        if (subj, "ED") in pooled and (subj, "ES") in pooled:
            (p_ed, g_ed), (p_es, g_es) = pooled[(subj, "ED")], pooled[(subj, "ES")]
            if p_ed and p_es:
                pred_ci = clinical_indices(p_ed, p_es)
                gt_ci = clinical_indices(g_ed, g_es)
                clinical.append({"subject": subj, **{f"pred_{k}": v for k, v in pred_ci.items()},
                                 **{f"gt_{k}": v for k, v in gt_ci.items()}})
    summary = {}
    for name in sorted({r["structure"] for r in rows}):
        sel = [r for r in rows if r["structure"] == name]
        summary[name] = {k: summarize(np.array([r[k] for r in sel if r[k] != ""], float))
                         for k in ("dice", "hd_mm", "mcd_mm", "mae_mm", "mse_mm2") if any(r[k] != "" for r in sel)}
    out = {"rows": rows, "clinical": clinical, "summary": summary}
    if topology.is_volumetric:
        reports = [tetra_quality(p, topology.tetras) for p in preds]
        out["quality"] = {
            m: summarize(np.concatenate([q.per_element[m] for q in reports])) for m in METRICS
        }
        out["quality"]["degenerate"] = int(sum(q.degenerate for q in reports))
        counts, edges = histogram(np.concatenate([q.per_element["scaled_jacobian"] for q in reports]))
        out["sj_histogram"] = {"edges": edges.tolist(), "counts": counts.tolist()}
    return out


def _csv(path: Path, rows: list[dict], columns) -> None:
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, columns)
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in columns})


def write_evaluation(out_dir, result: dict, extra: dict | None = None) -> None:
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    _csv(d / "metrics.csv", result["rows"], ROW_COLUMNS)
    if result["clinical"]:
        _csv(d / "clinical.csv", result["clinical"], list(result["clinical"][0]))
    payload = {k: v for k, v in result.items() if k not in ("rows", "clinical")}
    payload.update(extra or {})
    (d / "summary.json").write_text(json.dumps(payload, indent=1, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serialisable: {type(o)}")


QUALITY_COLUMNS = ("metric", "mean", "std", "min", "max", "p1", "p5", "p25", "p50", "p75")


def quality_rows(report) -> list[dict]:
    return [{"metric": m, **report.summary[m]} for m in METRICS]


def write_quality_csv(path, rows: list[dict]) -> None:
    _csv(Path(path), rows, QUALITY_COLUMNS)
