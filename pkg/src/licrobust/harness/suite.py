"""Suite orchestration: training, attacks, measurement passes and defenses over
an (image x submodel x direction) grid, with a resumable task manifest.

Tasks run in worker processes (or inline when one worker is configured) and
hand their results back to a single collector that owns every output file.
"""
from __future__ import annotations

import concurrent.futures as cf
import csv
import json
import logging
import math
import multiprocessing as mp
import os
import traceback
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np
import torch

from .. import analysis as an
from ..attacks import AttackConfig, arda, gaussian_control, srda
from ..models import CompressionModel, Family, load_checkpoint, save_checkpoint
from ..optim import ATConfig, TrainConfig, adversarial_finetune, joint_direction_sampler, online_update, train_rd
from .config import SuiteConfig
from .data import make_dataset
from .io import load_image, save_image

log = logging.getLogger(__name__)

MANIFEST = "manifest.jsonl"


class IncompleteBundle(RuntimeError):
    pass


def direction_label(d) -> str:
    return f"{d[0]:g}:{d[1]:g}"


@dataclass
class Task:
    id: str
    kind: str
    payload: dict


@dataclass
class SuiteBundle:
    out_dir: str
    reports: List[an.RDReport] = field(default_factory=list)
    eci_rows: List[dict] = field(default_factory=list)
    ldmr_rows: List[dict] = field(default_factory=list)
    online_rows: List[dict] = field(default_factory=list)
    at_rows: List[dict] = field(default_factory=list)
    failed: Dict[str, str] = field(default_factory=dict)
    n_tasks: int = 0

    @property
    def ok(self) -> bool:
        return not self.failed


# ---------------------------------------------------------------------------
# worker side

_MODEL_CACHE: Dict[str, CompressionModel] = {}


def _model(path) -> CompressionModel:
    m = _MODEL_CACHE.get(path)
    if m is None:
        m = _MODEL_CACHE[path] = load_checkpoint(path)
    return m


def _worker_init():
    torch.set_num_threads(1)


def _profile_rows(profile: an.MagnifyProfile, **ids):
    return [
        dict(ids, layer=n, interval=iv, ldmr=l, cdmr=c)
        for n, iv, l, c in zip(profile.names, profile.interval, profile.ldmr, profile.cdmr)
    ]


def _family_dataset(p):
    return make_dataset(p["train_images"], p["train_seed"], p["train_size"])


def _do_train(p):
    torch.manual_seed(p["init_seed"])
    model = CompressionModel(Family[p["family"]], p["lmbda"])
    cfg = TrainConfig(
        p["lmbda"], steps=p["steps"], crop=p["crop"], batch=p["batch"],
        lr=p["lr"], lr_final=p["lr_final"], warmup=p["warmup"], seed=p["seed"],
    )
    model, trace = train_rd(model, _family_dataset(p), cfg)
    os.makedirs(os.path.dirname(p["path"]), exist_ok=True)
    tmp = p["path"] + ".tmp"
    save_checkpoint(model, tmp)
    os.replace(tmp, p["path"])
    return {"path": p["path"], "final_loss": trace[-1].total}


def _do_at(p):
    base = _model(p["source"])
    cfg = ATConfig(iters=p["iters"], batch=p["batch"], crop=p["crop"], attack_steps=p["attack_steps"], eps=p["eps"], seed=p["seed"])
    model, trace = adversarial_finetune(base, _family_dataset(p), joint_direction_sampler, cfg)
    tmp = p["path"] + ".tmp"
    os.makedirs(os.path.dirname(p["path"]), exist_ok=True)
    save_checkpoint(model, tmp)
    os.replace(tmp, p["path"])
    ids = {"family": p["family"], "lambda_index": p["lambda_index"]}
    return {"path": p["path"], "at_rows": [dict(ids, **r) for r in trace]}


def _ids(p, attack):
    return dict(
        family=p["family"], lambda_index=p["lambda_index"],
        direction=direction_label(p["direction"]), image_id=p["image_id"], attack=attack,
    )


def _do_srda(p):
    model = _model(p["checkpoint"])
    x = p["x"]
    gr, gd = p["direction"]
    res = srda(model, x, AttackConfig(gr, gd, eps=p["eps"], steps=p["steps"]))
    ids = _ids(p, p["attack"])
    out = {
        "reports": [asdict(an.perf_variation(model, x, res.x_adv, **ids))],
        "unstable": res.unstable,
        "aborted": res.aborted,
        "x_adv": res.x_adv,
    }
    if p.get("eci"):
        rows = []
        for r in an.eci_table(model, x, res.x_adv):
            rows.append(
                dict(ids, do_set="+".join(r.do_set) or "none", bitrate_y=r.bitrate_y, bitrate_z=r.bitrate_z,
                     bitrate=r.bitrate, delta_mean=r.delta_mean, scale=r.scale)
            )
        out["eci_rows"] = rows
    if p.get("ldmr"):
        try:
            out["ldmr_rows"] = _profile_rows(an.ldmr_cdmr(model, x, res.x_adv), kind="attack", **ids)
        except an.ZeroDistanceError as e:
            out["ldmr_error"] = str(e)
    if p.get("local_maps"):
        maps = an.local_maps(model, x, res.x_adv)
        out["maps"] = {"rate": maps.rate, "dist": maps.dist}
    if p.get("online_iters") is not None:
        on = online_update(model, res.x_adv, model.lmbda, p["online_iters"])
        out["reports"].append(asdict(an.perf_variation(model, x, on.x_u, **_ids(p, p["attack"] + "+online"))))
        base = dict(ids)
        out["online_rows"] = [dict(base, **r) for r in on.trace]
    return out


def _do_arda(p):
    models = [_model(c) for c in p["checkpoints"]]
    x = p["x"]
    gr, gd = p["direction"]
    res = arda(models, x, AttackConfig(gr, gd, eps=p["eps"], steps=p["steps"], tau=p["tau"]))
    reports = []
    for li, m in enumerate(models):
        ids = _ids(dict(p, lambda_index=li), "arda")
        reports.append(asdict(an.perf_variation(m, x, res.x_adv, **ids)))
    return {"reports": reports, "unstable": res.unstable, "aborted": res.aborted, "init_losses": res.init_losses}


def _do_control(p):
    model = _model(p["checkpoint"])
    x = p["x"]
    xn = gaussian_control(x, p["eps"], p["seed"])
    ids = _ids(dict(p, direction=(0.0, 0.0)), "noise")
    out = {"reports": [asdict(an.perf_variation(model, x, xn, **ids))]}
    if p.get("ldmr"):
        rows = []
        try:
            rows += _profile_rows(an.ldmr_cdmr(model, x, xn), kind="noise", **ids)
        except an.ZeroDistanceError as e:
            out["ldmr_error"] = str(e)
        if p.get("pair") is not None:
            bids = dict(ids, attack="benign", image_id=f"{p['image_id']}|{p['pair_id']}")
            rows += _profile_rows(an.ldmr_cdmr(model, x, p["pair"]), kind="benign", **bids)
        out["ldmr_rows"] = rows
    return out


_RUNNERS = {"train": _do_train, "at": _do_at, "srda": _do_srda, "arda": _do_arda, "control": _do_control}


def execute(task: Task):
    """Run one task; returns ``(id, result, error)``."""
    try:
        return task.id, _RUNNERS[task.kind](task.payload), None
    except Exception as e:  # recorded in the manifest, the suite continues
        log.debug("task %s failed", task.id, exc_info=True)
        return task.id, None, f"{type(e).__name__}: {e}\n{traceback.format_exc(limit=3)}"


# ---------------------------------------------------------------------------
# collector side


class _Collector:
    def __init__(self, out_dir):
        self.out = out_dir
        self.task_dir = os.path.join(out_dir, "tasks")
        os.makedirs(self.task_dir, exist_ok=True)
        self.done: Dict[str, dict] = {}
        self.failed: Dict[str, str] = {}
        path = os.path.join(out_dir, MANIFEST)
        if os.path.exists(path):
            with open(path) as f:
                for line in f:
                    try:
                        e = json.loads(line)
                    except json.JSONDecodeError:
                        continue  # torn final line after a crash
                    if e.get("status") == "done":
                        self.done[e["id"]] = None
        self.manifest = open(path, "a")

    def _result_path(self, tid):
        return os.path.join(self.task_dir, tid.replace("/", "_") + ".json")

    def completed(self, tid) -> Optional[dict]:
        if tid not in self.done:
            return None
        if self.done[tid] is None:
            try:
                with open(self._result_path(tid)) as f:
                    self.done[tid] = json.load(f)
            except (OSError, json.JSONDecodeError):
                del self.done[tid]
                return None
        return self.done[tid]

    def record(self, tid, result, error):
        if error is not None:
            self.failed[tid] = error
            self.manifest.write(json.dumps({"id": tid, "status": "failed", "error": error.splitlines()[0]}) + "\n")
        else:
            x_adv = result.pop("x_adv", None)
            if x_adv is not None:
                adv_dir = os.path.join(self.out, "adv")
                os.makedirs(adv_dir, exist_ok=True)
                save_image(x_adv, os.path.join(adv_dir, tid.replace("/", "_") + ".ppm"), 16)
            maps = result.pop("maps", None)
            if maps is not None:
                map_dir = os.path.join(self.out, "maps")
                os.makedirs(map_dir, exist_ok=True)
                stem = os.path.join(map_dir, tid.replace("/", "_"))
                for k, m in maps.items():
                    an.write_grid(m, f"{stem}.{k}.txt")
                    an.write_pgm(m, f"{stem}.{k}.pgm")
            tmp = self._result_path(tid) + ".tmp"
            with open(tmp, "w") as f:
                json.dump(result, f, sort_keys=True)
            os.replace(tmp, self._result_path(tid))
            self.done[tid] = result
            entry = {"id": tid, "status": "done"}
            if result.get("init_losses") is not None:
                entry["init_losses"] = result["init_losses"]  # ARDA's L_init, per image and submodel
            self.manifest.write(json.dumps(entry) + "\n")
        self.manifest.flush()

    def close(self):
        self.manifest.close()


def _run_phase(tasks: List[Task], collector: _Collector, workers: int):
    todo = [t for t in tasks if collector.completed(t.id) is None]
    if not todo:
        return
    log.info("running %d of %d tasks", len(todo), len(tasks))
    if workers <= 1:
        for t in todo:
            collector.record(*execute(t))
        return
    ctx = mp.get_context("spawn")
    with cf.ProcessPoolExecutor(workers, mp_context=ctx, initializer=_worker_init) as pool:
        futs = [pool.submit(execute, t) for t in todo]
        for fut in cf.as_completed(futs):
            collector.record(*fut.result())


def _eval_images(cfg: SuiteConfig):
    out = []
    for p in cfg.images:
        rec = load_image(p)
        rec.check_model_input()
        out.append((os.path.splitext(os.path.basename(p))[0], rec.pixels))
    if cfg.synthetic_images:
        data = make_dataset(cfg.synthetic_images, cfg.seed + 1, cfg.image_size)
        out += [(f"syn{k:03d}", data[k : k + 1]) for k in range(len(data))]
    return out


def run_suite(cfg: SuiteConfig) -> SuiteBundle:
    out_dir = cfg.output_dir
    os.makedirs(out_dir, exist_ok=True)
    an.write_json(cfg.to_dict(), os.path.join(out_dir, "config.json"))
    workers = cfg.effective_workers()
    collector = _Collector(out_dir)
    images = _eval_images(cfg)
    ck_dir = cfg.checkpoint_dir or os.path.join(out_dir, "checkpoints")
    tr = cfg.train
    data_args = {"train_images": tr.images, "train_seed": cfg.seed + 2, "train_size": tr.size}
    grid = [(fam, li, lam) for fam in cfg.families for li, lam in enumerate(cfg.lambdas)]
    ckpt = {(fam, li): os.path.join(ck_dir, f"{fam}_{li}.licm") for fam, li, _ in grid}
    all_tasks: List[Task] = []

    try:
        # phase 1: checkpoints
        train_tasks = []
        for fam, li, lam in grid:
            path = ckpt[(fam, li)]
            if os.path.exists(path):
                continue
            if not tr.enabled:
                collector.record(f"train/{fam}_{li}", None, f"missing checkpoint {path} and training disabled")
                continue
            train_tasks.append(
                Task(f"train/{fam}_{li}", "train", dict(
                    data_args, family=fam, lmbda=lam, path=path, steps=tr.steps, crop=tr.crop, batch=tr.batch,
                    lr=tr.lr, lr_final=tr.lr_final, warmup=tr.warmup, seed=cfg.seed + li, init_seed=cfg.seed * 1000 + 10 * Family[fam] + li,
                ))
            )
        _run_phase(train_tasks, collector, workers)
        all_tasks += train_tasks

        # phase 2: adversarial finetuning
        d = cfg.defense
        at_ckpt = {}
        if d.at:
            at_tasks = []
            for fam, li, _ in grid:
                at_ckpt[(fam, li)] = os.path.join(out_dir, "checkpoints_at", f"{fam}_{li}.licm")
                if not os.path.exists(ckpt[(fam, li)]):
                    continue
                at_tasks.append(
                    Task(f"at/{fam}_{li}", "at", dict(
                        data_args, family=fam, lambda_index=li, source=ckpt[(fam, li)], path=at_ckpt[(fam, li)],
                        iters=d.at_iters, batch=d.at_batch, crop=tr.crop, attack_steps=d.at_attack_steps,
                        eps=cfg.eps, seed=cfg.seed + 3,
                    ))
                )
            _run_phase(at_tasks, collector, workers)
            all_tasks += at_tasks

        # phase 3: attacks and measurements
        tasks = []
        common = {"eps": cfg.eps, "steps": cfg.steps}
        for k, (iid, x) in enumerate(images):
            pair_id, pair = images[(k + 1) % len(images)] if len(images) > 1 else (None, None)
            for fam, li, _ in grid:
                if not os.path.exists(ckpt[(fam, li)]):
                    continue
                base = dict(common, image_id=iid, x=x, family=fam, lambda_index=li)
                for di, dirn in enumerate(cfg.directions):
                    tasks.append(Task(
                        f"srda/{iid}/{fam}_{li}/d{di}", "srda",
                        dict(base, direction=tuple(dirn), checkpoint=ckpt[(fam, li)], attack="srda",
                             eci=cfg.eci, ldmr=cfg.ldmr, local_maps=cfg.local_maps,
                             online_iters=d.online_iters if d.online else None),
                    ))
                    if d.at and os.path.exists(at_ckpt[(fam, li)]):
                        tasks.append(Task(
                            f"srda_at/{iid}/{fam}_{li}/d{di}", "srda",
                            dict(base, direction=tuple(dirn), checkpoint=at_ckpt[(fam, li)], attack="srda@at"),
                        ))
                tasks.append(Task(
                    f"control/{iid}/{fam}_{li}", "control",
                    dict(base, checkpoint=ckpt[(fam, li)], seed=cfg.seed + 4 + k, ldmr=cfg.ldmr,
                         pair=pair, pair_id=pair_id),
                ))
            if cfg.arda:
                for fam in cfg.families:
                    paths = [ckpt[(fam, li)] for li in range(len(cfg.lambdas))]
                    if not all(os.path.exists(p) for p in paths):
                        continue
                    for di, dirn in enumerate(cfg.directions):
                        tasks.append(Task(
                            f"arda/{iid}/{fam}/d{di}", "arda",
                            dict(common, image_id=iid, x=x, family=fam, direction=tuple(dirn),
                                 checkpoints=paths, tau=cfg.tau),
                        ))
        _run_phase(tasks, collector, workers)
        all_tasks += tasks
    finally:
        collector.close()

    bundle = SuiteBundle(out_dir, failed=dict(collector.failed), n_tasks=len(all_tasks))
    for t in all_tasks:
        r = collector.completed(t.id)
        if r is None:
            bundle.failed.setdefault(t.id, "no result")
            continue
        bundle.reports += [an.RDReport(**row) for row in r.get("reports", [])]
        bundle.eci_rows += r.get("eci_rows", [])
        bundle.ldmr_rows += r.get("ldmr_rows", [])
        bundle.online_rows += r.get("online_rows", [])
        bundle.at_rows += r.get("at_rows", [])
    write_bundle(bundle)
    return bundle


# ---------------------------------------------------------------------------
# outputs


def _write_rows(rows, path, columns):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else ("" if v is None else v)) for k, v in r.items()})


ECI_COLUMNS = ["family", "lambda_index", "direction", "image_id", "attack", "do_set",
               "bitrate_y", "bitrate_z", "bitrate", "delta_mean", "scale"]
LDMR_COLUMNS = ["kind", "family", "lambda_index", "direction", "image_id", "layer", "interval", "ldmr", "cdmr"]


def write_bundle(bundle: SuiteBundle):
    out = bundle.out_dir
    an.write_reports_csv(bundle.reports, os.path.join(out, "reports.csv"))
    nested = {"reports": [r.row() for r in bundle.reports], "aggregates": {}, "failed": sorted(bundle.failed)}
    by_attack = defaultdict(list)
    for r in bundle.reports:
        by_attack[r.attack].append(r)
    for attack, rs in sorted(by_attack.items()):
        nested["aggregates"][attack] = {
            by: {("/".join(map(str, k)) if isinstance(k, tuple) else str(k)): asdict(v)
                 for k, v in an.aggregate(rs, by).items()}
            for by in ("all", "direction", "submodel")
        }
    an.write_json(nested, os.path.join(out, "reports.json"))
    if bundle.eci_rows:
        _write_rows(bundle.eci_rows, os.path.join(out, "eci.csv"), ECI_COLUMNS)
    if bundle.ldmr_rows:
        _write_rows(bundle.ldmr_rows, os.path.join(out, "ldmr.csv"), LDMR_COLUMNS)


FIGURES = ("rd_curves", "delta_scatter", "ldmr", "defense")


def emit_plotdata(bundle: SuiteBundle, out_dir: Optional[str] = None, figures=None) -> List[str]:
    """Write one CSV per figure family under ``<out>/plotdata``; returns the paths.

    Asking explicitly for a figure the bundle cannot support raises
    ``IncompleteBundle``; with ``figures=None`` unsupported ones are skipped.
    """
    explicit = figures is not None
    figures = tuple(figures) if explicit else FIGURES
    out_dir = out_dir or os.path.join(bundle.out_dir, "plotdata")
    os.makedirs(out_dir, exist_ok=True)
    written = []

    def missing(name, why):
        if explicit:
            raise IncompleteBundle(f"{name}: {why}")

    srda_reports = [r for r in bundle.reports if r.attack == "srda"]
    if "rd_curves" in figures:
        if not srda_reports:
            missing("rd_curves", "no SRDA reports")
        groups = defaultdict(list)
        for r in srda_reports:
            groups[(r.family, r.direction, r.lambda_index)].append(r)
        for fam in sorted({k[0] for k in groups}):
            path = os.path.join(out_dir, f"rd_curves_{fam}.csv")
            rows = []
            for (f, dirn, li), rs in sorted(groups.items(), key=lambda kv: (kv[0][1], kv[0][2])):
                if f != fam:
                    continue
                rows.append({
                    "lambda_index": li,
                    "bpp_pre": float(np.mean([r.rate for r in rs])),
                    "psnr_pre": an.psnr(float(np.mean([r.dist for r in rs]))),
                    "bpp_post": float(np.mean([r.rate_adv for r in rs])),
                    "psnr_post": an.psnr(float(np.mean([r.dist_adv for r in rs]))),
                    "direction": dirn,
                })
            _write_rows(rows, path, ["lambda_index", "bpp_pre", "psnr_pre", "bpp_post", "psnr_post", "direction"])
            written.append(path)
    if "delta_scatter" in figures:
        if not bundle.reports:
            missing("delta_scatter", "no reports")
        else:
            path = os.path.join(out_dir, "delta_scatter.csv")
            rows = [r.row() for r in bundle.reports]
            _write_rows(rows, path, ["attack", "family", "lambda_index", "direction", "image_id", "delta_rate", "delta_dist"])
            written.append(path)
    if "ldmr" in figures:
        if not bundle.ldmr_rows:
            missing("ldmr", "suite ran without LDMR")
        per_fam = defaultdict(lambda: defaultdict(list))
        order = defaultdict(list)
        for r in bundle.ldmr_rows:
            per_fam[r["family"]][(r["layer"], r["kind"])].append((r["ldmr"], r["cdmr"]))
            if r["layer"] not in order[r["family"]]:
                order[r["family"]].append(r["layer"])
        for fam in sorted(per_fam):
            path = os.path.join(out_dir, f"ldmr_{fam}.csv")
            cols = ["layer"]
            kinds = ("attack", "noise", "benign")
            for k in kinds:
                cols += [f"ldmr_{k}", f"cdmr_{k}"]
            rows = []
            for layer in order[fam]:
                row = {"layer": layer}
                for k in kinds:
                    vals = per_fam[fam].get((layer, k))
                    if vals:
                        row[f"ldmr_{k}"] = float(np.mean([v[0] for v in vals]))
                        row[f"cdmr_{k}"] = float(np.mean([v[1] for v in vals]))
                rows.append(row)
            _write_rows(rows, path, cols)
            written.append(path)
    if "defense" in figures:
        if not bundle.online_rows and not bundle.at_rows:
            missing("defense", "suite ran without defenses")
        if bundle.online_rows:
            by_iter = defaultdict(list)
            for r in bundle.online_rows:
                by_iter[r["iter"]].append(r)
            rows = [
                {"iteration": it, "loss": float(np.mean([r["loss"] for r in rs])),
                 "best": float(np.mean([r["best"] for r in rs])), "runs": len(rs)}
                for it, rs in sorted(by_iter.items())
            ]
            path = os.path.join(out_dir, "defense_trajectory.csv")
            _write_rows(rows, path, ["iteration", "loss", "best", "runs"])
            written.append(path)
        if bundle.at_rows:
            path = os.path.join(out_dir, "at_trace.csv")
            _write_rows(bundle.at_rows, path, ["family", "lambda_index", "iter", "gamma_r", "gamma_d", "rate", "distortion", "total"])
            written.append(path)
    return written
