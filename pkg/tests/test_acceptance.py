"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are also repeated in pytest's terminal summary. Criteria 8-12 train
real models on the default synthetic dataset and take about 20 minutes on one
CPU core. Run standalone with ``python tests/test_acceptance.py``.
"""

import itertools
import json
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from kdsearch import autograd as ag
from kdsearch import losses
from kdsearch.augment import fsa_shift, isa_crop_range, roi_align, sample_grid
from kdsearch.cli import main as cli
from kdsearch.metrics import cmc_at_k, detection_ap_recall, query_ap
from kdsearch.models import StudentModel
from kdsearch.train import KD_ROWS, evaluate_student, run_ablation
from kdsearch.types import FULL_SIZE_AUG, AugConfig, BoundingBox, LossConfig, Rng

from conftest import GRAD_RTOL, check_grads, check_model_grads
from test_losses import bf_kl, bf_pairwise, bf_triplet, rand_probs
from test_metrics import bf_ap, bf_cmc
from test_models import TOY, _full_loss, toy_batch

SEEDS = (0, 1, 2)
EVAL_SIZES = (8, 16, 32, 64)
RESULTS: list[str] = []


def report(n: int, title: str, ok: bool, detail: str):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n:>2} {title}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


# --- 1-7: exactness ---------------------------------------------------------------


def test_c01_gradient_exactness():
    t0 = time.perf_counter()
    worst = {}
    rng = np.random.default_rng(100)
    for _ in range(5):
        b, d, c = int(rng.integers(2, 7)), int(rng.integers(2, 9)), int(rng.integers(2, 6))
        zs, zs2 = rng.normal(size=(b, c)), rng.normal(size=(b, c))
        pt, pt2 = rand_probs(rng, b, c), rand_probs(rng, b, c)
        fs, ft = rng.normal(size=(b, d)), rng.normal(size=(b, d))
        labels = rng.integers(0, c, size=b)
        sm = lambda z: ag.softmax(z, axis=1)  # noqa: E731
        errs = {
            "prob_kd": check_grads(lambda z: losses.prob_kd(sm(z), pt), zs),
            "prob_kd_fsa": check_grads(lambda z, z2: losses.prob_kd_fsa(sm(z), sm(z2), pt, pt2), zs, zs2),
            "pairwise_relation_kd": check_grads(lambda f: losses.pairwise_relation_kd(f, ft), fs),
            "triplet_relation_kd": check_grads(lambda f: losses.triplet_relation_kd(f, ft, 2.0), fs),
            "reid_ce": check_grads(lambda z: losses.reid_ce(z, labels), zs),
        }
        for k, v in errs.items():
            worst[k] = max(worst.get(k, 0.0), v)

    cfg = LossConfig()
    model = StudentModel(Rng(6), **TOY)
    images, boxes, props = toy_batch(1)
    t_emb = rng.normal(size=(4, 8))
    t_prob = ag.softmax(ag.Tensor(rng.normal(size=(4, 5)))).data
    t_prob_s = ag.softmax(ag.Tensor(rng.normal(size=(4, 5)))).data
    block_errs = check_model_grads(
        model, lambda: losses.weighted_total(_full_loss(model, images, boxes, props, t_emb, t_prob, t_prob_s, cfg), cfg)
    )
    worst["composite (full student)"] = max(block_errs.values())
    elapsed = time.perf_counter() - t0
    bad = max(worst, key=worst.get)
    report(1, "gradient exactness", worst[bad] <= GRAD_RTOL and elapsed < 60,
           f"worst rel err {worst[bad]:.2e} ({bad}), {elapsed:.1f}s")


def test_c02_loss_oracles():
    rng = np.random.default_rng(200)
    worst = 0.0
    for _ in range(100):
        b, d, c = int(rng.integers(2, 9)), int(rng.integers(1, 9)), int(rng.integers(2, 6))
        p, q = rand_probs(rng, b, c), rand_probs(rng, b, c)
        fs, ft = rng.normal(size=(b, d)), rng.normal(size=(b, d))
        m = rng.uniform(0, 2)
        worst = max(
            worst,
            abs(float(losses.prob_kd(p, q).data) - bf_kl(p.tolist(), q.tolist())),
            abs(float(losses.pairwise_relation_kd(fs, ft).data) - bf_pairwise(fs.tolist(), ft.tolist())),
            abs(float(losses.triplet_relation_kd(fs, ft, m).data) - bf_triplet(fs.tolist(), ft.tolist(), m)),
        )
    report(2, "loss oracles", worst <= 1e-9, f"max |diff| {worst:.2e} over 100 instances x 3 losses")


def test_c03_pairwise_scaling_invariance():
    rng = np.random.default_rng(300)
    worst = 0.0
    for _ in range(100):
        b, d = int(rng.integers(2, 9)), int(rng.integers(1, 9))
        fs, ft = rng.normal(size=(b, d)), rng.normal(size=(b, d))
        base = float(losses.pairwise_relation_kd(fs, ft).data)
        a = np.exp(rng.uniform(-3, 3))
        worst = max(worst, abs(float(losses.pairwise_relation_kd(a * fs, ft).data) - base),
                    abs(float(losses.pairwise_relation_kd(fs, a * ft).data) - base))
    report(3, "pairwise scaling invariance", worst <= 1e-9, f"max |diff| {worst:.2e}")


def test_c04_isa_formula():
    cfg = FULL_SIZE_AUG  # delta_p 10, alpha 40, 256 x 128
    cases = [(64, 128, 10.0, 10.0), (64, 2000, 10.0, 40.0), (1000, 128, 40.0, 10.0), (640, 512, 40.0, 40.0)]
    ok = all(
        (r := isa_crop_range(BoundingBox(0, 0, w, h), cfg)) and (r.r_w, r.r_h) == (ew, eh) for w, h, ew, eh in cases
    )
    rng = np.random.default_rng(400)
    branches = set()
    for w, h in rng.uniform(1, 2000, size=(1000, 2)):
        r = isa_crop_range(BoundingBox(0, 0, w, h), cfg)
        ok &= r.r_h == min(2 * h * 10 / 256, 40) and r.r_w == min(2 * w * 10 / 128, 40)
        branches.add(r.r_h == 40)
    ok &= branches == {True, False}
    report(4, "ISA formula", bool(ok), "exact on 4 hand cases and 1000 random boxes, both clamp branches hit")


def test_c05_fsa_consistency():
    rng = Rng(500)
    cfg = AugConfig()
    worst = 0.0
    for _ in range(1000):
        w, h = rng.uniform(8, 30), rng.uniform(20, 60)
        box = BoundingBox(rng.uniform(0, 192 - w), rng.uniform(0, 128 - h), w, h)
        p = fsa_shift(box, isa_crop_range(box, cfg), cfg, rng, (128, 192))
        worst = max(worst, np.abs(p.feature_window() * cfg.stride - p.image_box().as_array()).max())
    report(5, "FSA consistency", worst <= 1e-9, f"max corner gap {worst:.2e} px over 1000 draws")


def test_c06_roi_align():
    rng = np.random.default_rng(600)
    lin = 0.0
    for _ in range(100):
        a, b, c = rng.normal(size=3)
        ys, xs = np.mgrid[0:9, 0:11] + 0.5
        fm = (a * xs + b * ys + c)[None]
        x, y = rng.uniform(0.5, 5), rng.uniform(0.5, 4)
        w, h = rng.uniform(0.5, 10.5 - x), rng.uniform(0.5, 8.5 - y)
        oh, ow = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        out = roi_align(fm, np.array([x, y, w, h]), oh, ow).data[0]
        gy, gx = sample_grid((x, y, w, h), oh, ow)
        lin = max(lin, np.abs(out - (a * gx[None] + b * gy[:, None] + c)).max())
    const = np.abs(roi_align(np.full((2, 6, 6), 3.25), np.array([0.7, 1.2, 3.1, 2.5]), 4, 3).data - 3.25).max()
    grad = 0.0
    for seed in range(5):
        r = np.random.default_rng(seed)
        fm = r.normal(size=(1, 6, 6))
        box = np.array([r.uniform(-0.5, 2), r.uniform(-0.5, 2), r.uniform(1, 4), r.uniform(1, 4)])
        coef = r.normal(size=(1, 3, 2))
        grad = max(grad, check_grads(lambda f: (roi_align(f, box, 3, 2) * coef).sum(), fm))
    ok = lin <= 1e-9 and const <= 1e-12 and grad <= GRAD_RTOL
    report(6, "RoIAlign", ok, f"linear err {lin:.2e}, constant err {const:.2e}, grad rel err {grad:.2e}")


def test_c07_metric_oracles():
    checked, ok = 0, True
    for n in range(1, 7):
        for flags in itertools.product([False, True], repeat=n):
            n_rel = sum(flags)
            for extra in (0, 1):
                if n_rel + extra:
                    ok &= abs(query_ap(list(flags), n_rel + extra) - bf_ap(flags, n_rel + extra)) < 1e-12
            for k in range(1, n + 2):
                ok &= cmc_at_k(list(flags), k) == bf_cmc(flags, k)
            checked += 1
    gt = [np.array([[0.0, 0.0, 10.0, 10.0]])]
    preds = [(np.array([[50.0, 50.0, 10.0, 10.0], [0.0, 0.0, 10.0, 10.0]]), np.array([0.9, 0.4]))]
    ap, _ = detection_ap_recall(preds, gt)
    ok &= ap == 0.5
    report(7, "metric oracles", bool(ok), f"{checked} ranked galleries match brute force; detection AP example = {ap}")


# --- 8-10: trained sweeps -----------------------------------------------------------


@pytest.fixture(scope="module")
def sweep(default_dataset):
    models = {}

    def keep(name, seed, model, record):
        models[(name, seed)] = model

    t0 = time.perf_counter()
    kd_table = run_ablation(default_dataset, SEEDS, KD_ROWS, on_run=keep)
    elapsed = time.perf_counter() - t0
    aug_table = run_ablation(default_dataset, SEEDS, ["Ours-1", "Ours-2", "Ours-3"])
    summary = {**kd_table.summary(), **aug_table.summary()}
    print("\n" + kd_table.table() + "\n" + aug_table.table())
    return {"summary": summary, "elapsed": elapsed, "models": models}


def test_c08_kd_ablation_direction(sweep):
    s = {k: v["map_mean"] for k, v in sweep["summary"].items()}
    ok = s["Ours"] > s["Ours-0"] and s["Ours-4"] >= s["Ours-0"] - 1 and s["Ours-5"] >= s["Ours-0"] - 1
    ok &= sweep["elapsed"] < 30 * 60
    detail = ", ".join(f"{k} {s[k]:.2f}" for k in ("Ours-0", "Ours-4", "Ours-5", "Ours"))
    report(8, "distillation-term ablation direction", ok, f"mean mAP {detail}; sweep {sweep['elapsed'] / 60:.1f} min")


def test_c09_aug_ablation_direction(sweep):
    s = {k: v["map_mean"] for k, v in sweep["summary"].items()}
    ok = s["Ours-2"] >= s["Ours-1"] - 0.5 and s["Ours-3"] >= s["Ours-2"] - 0.5
    detail = ", ".join(f"{k} {s[k]:.2f}" for k in ("Ours-1", "Ours-2", "Ours-3"))
    report(9, "augmentation ablation direction", ok, f"mean mAP {detail}")


def test_c10_gallery_size_trend(sweep, default_dataset):
    violations = []
    for key, model in sweep["models"].items():
        reports = evaluate_student(model, default_dataset, EVAL_SIZES)
        maps = [reports[n].reid_map for n in EVAL_SIZES]
        if any(b > a for a, b in zip(maps, maps[1:])):
            violations.append((key, maps))
    report(10, "gallery-size trend", not violations,
           f"{len(sweep['models'])} checkpoints non-increasing over {list(EVAL_SIZES)}"
           if not violations else f"violations {violations}")


# --- 11-12: CLI pipeline ----------------------------------------------------------


def _pipeline(root: Path, delete_teacher: bool) -> dict:
    def step(*argv):
        before = set(root.iterdir())
        assert cli([str(a) for a in argv]) == 0, argv
        (made,) = set(root.iterdir()) - before
        return made

    data = step("gen-data", "--out", root)
    teacher = step("train-teacher", "--data", data, "--aug", "isa", "--out", root) / "teacher.ckpt"
    student = step("train-student", "--data", data, "--teacher", teacher, "--row", "Ours", "--out", root) / "student.ckpt"
    teacher_bytes = teacher.read_bytes()
    if delete_teacher:
        for p in teacher.parent.iterdir():
            p.unlink()
        teacher.parent.rmdir()
    sizes = ",".join(map(str, EVAL_SIZES))
    reports = step("eval", "--data", data, "--student", student, "--gallery-sizes", sizes, "--out", root)
    return {
        "teacher": teacher_bytes,
        "student": student.read_bytes(),
        "run": json.loads((student.parent / "run.json").read_text())["losses"],
        "reports": {p.name: p.read_bytes() for p in sorted(reports.iterdir())},
    }


@pytest.fixture(scope="module")
def pipelines(tmp_path_factory):
    return _pipeline(tmp_path_factory.mktemp("a"), True), _pipeline(tmp_path_factory.mktemp("b"), False)


def test_c11_inference_without_teacher(pipelines):
    a, _ = pipelines
    n = sum(name.endswith(".json") for name in a["reports"])
    report(11, "inference independence", n == len(EVAL_SIZES),
           f"eval wrote {n} reports after the teacher checkpoint was deleted")


def test_c12_determinism(pipelines):
    a, b = pipelines
    ok = a["teacher"] == b["teacher"] and a["student"] == b["student"] and a["run"] == b["run"]
    ok &= a["reports"] == b["reports"]
    report(12, "determinism", ok, "teacher, student and report bytes identical across two runs" if ok
           else "artifacts differ between runs")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
