"""Acceptance suite: one PASS/FAIL line per criterion, printed even under capture."""

import csv
import time

import numpy as np
import pytest

from conftest import check_golden, make_model
from oracles import naive_bins, naive_explain_step, naive_pool_avg, random_record
from rgaekit import compressor as C
from rgaekit import gradcheck, render, rgae, traceio
from rgaekit.training import convergence_study, train


@pytest.fixture
def report(capsys):
    def emit(number, title, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number:2d} {title}: {detail}")
        assert ok, detail

    return emit


def _model_records(task, seeds=range(3)):
    """Teacher-forced generation records from untrained models of every projector kind."""
    records = []
    for kind, m in (("linear", 16), ("avgpool", 4), ("maxpool", 4), ("resampler", 4)):
        for seed in seeds:
            model = make_model(kind, m, seed=seed)
            image, caption = task.sample(np.random.default_rng(100 + seed))
            records.append(model.generate(image, task.prompt_ids(), 16, text_ids=task.vocab.encode(caption)))
    return records


def test_c01_gradient_correctness(report):
    start = time.perf_counter()
    errors = gradcheck.run_all(seed=0, h=1e-5)
    elapsed = time.perf_counter() - start
    worst = max(errors.values())
    name = max(errors, key=errors.get)
    ok = worst < 1e-6 and elapsed < 60 and any(k.startswith("model_") for k in errors)
    report(1, "gradient correctness", ok,
           f"{len(errors)} checks, max relative error {worst:.2e} ({name}), {elapsed:.1f}s")


def test_c02_pooling_oracle(report):
    rng = np.random.default_rng(2)
    mismatches, cases = 0, 0
    for in_side in range(1, 33):
        x = rng.normal(size=(in_side * in_side, 2))
        for out_side in range(1, in_side + 1):
            plan = C.plan_bins(in_side, out_side)
            cases += 1
            same_bins = list(plan.bins) == naive_bins(in_side, out_side)
            same_vals = np.array_equal(C.pool_avg(x, plan), naive_pool_avg(x, in_side, out_side))
            mismatches += not (same_bins and same_vals)
    six = C.plan_bins(6, 4).bins
    ok = mismatches == 0 and six == ((0, 2), (1, 3), (3, 5), (4, 6))
    report(2, "pooling oracle", ok, f"{cases} size pairs bit-identical ({mismatches} mismatches); 6->4 bins {six}")


def test_c03_pooling_identities(report):
    rng = np.random.default_rng(3)
    ident = mean = struct = 0.0
    for in_side in range(1, 17):
        x = rng.normal(size=(in_side * in_side, 3))
        if not np.array_equal(C.pool_avg(x, C.plan_bins(in_side, in_side)), x):
            ident = np.inf
        for out_side in range(1, in_side + 1):
            plan = C.plan_bins(in_side, out_side)
            y = C.pool_avg(x, plan)
            struct = max(struct, np.max(np.abs(y - C.structural_map_avg(plan) @ x)))
            if in_side % out_side == 0:
                mean = max(mean, np.max(np.abs(y.mean(axis=0) - x.mean(axis=0))))
    ok = ident == 0 and mean < 1e-12 and struct < 1e-12
    report(3, "pooling identities", ok,
           f"identity exact={ident == 0}, mean drift {mean:.1e}, structural-map diff {struct:.1e}")


def test_c04_relevance_algebra(report):
    worst, negatives, nonzero, traces = 0.0, 0, 0, 0
    for seed in range(150):
        rec = random_record(seed)
        for rule in ("simple", "normalized"):
            for t, step in enumerate(rgae.explain(rec, rule).steps):
                ref = naive_explain_step(rec, t, rule)
                got = (step.text_to_query, step.query_to_patch, step.text_to_patch)
                worst = max(worst, *(np.max(np.abs(a - b)) for a, b in zip(got, ref)))
                negatives += sum(int(np.sum(m < 0)) for m in got + (step.decoder_relevance,))
        traces += 1
        zero = rgae.explain(random_record(seed, zero_grads=True))
        nonzero += int(np.any(zero.text_to_patch != 0))
    ok = traces >= 100 and worst < 1e-12 and negatives == 0 and nonzero == 0
    report(4, "relevance algebra", ok,
           f"{traces} random traces, oracle diff {worst:.1e}, negative entries {negatives}, "
           f"nonzero maps under zero gradients {nonzero}")


def test_c05_composition_law(report, task):
    worst, steps = 0.0, 0
    records = [random_record(s) for s in range(60)] + _model_records(task)
    for rec in records:
        for rule in ("simple", "normalized"):
            for step in rgae.explain(rec, rule).steps:
                worst = max(worst, np.max(np.abs(step.text_to_patch - step.text_to_query @ step.query_to_patch)))
                steps += 1
        for step in rgae.raw_attention_baseline(rec).steps:
            worst = max(worst, np.max(np.abs(step.text_to_patch - step.text_to_query @ step.query_to_patch)))
            steps += 1
    report(5, "composition law", worst < 1e-12, f"{steps} explained steps, max deviation {worst:.1e}")


def test_c06_structural_maps(report, task):
    row_sums_exact, linear_exact, checked = True, True, 0
    # reference configurations: 576 -> 144 and 6 -> 4, plus every map the engine emits below
    for in_side, out_side in ((24, 12), (6, 4), (4, 2), (4, 1)):
        S = C.structural_map_avg(C.plan_bins(in_side, out_side))
        row_sums_exact &= bool(np.all(S.sum(axis=1) == 1.0))
    for rec in _model_records(task) + [random_record(s) for s in range(30)]:
        for step in rgae.explain(rec).steps:
            checked += 1
            if rec.projector_kind.value == "avgpool":
                row_sums_exact &= bool(np.all(step.query_to_patch.sum(axis=1) == 1.0))
            if rec.projector_kind.value == "linear":
                linear_exact &= bool(np.array_equal(step.text_to_patch, step.text_to_query))
    # full sweep: weights are fl(1/|window|), so some window areas (e.g. 49) cannot sum to exactly 1
    inexact, rows, worst_ulp = 0, 0, 0.0
    for in_side in range(1, 33):
        for out_side in range(1, in_side + 1):
            sums = C.structural_map_avg(C.plan_bins(in_side, out_side)).sum(axis=1)
            rows += sums.size
            inexact += int(np.sum(sums != 1.0))
            worst_ulp = max(worst_ulp, float(np.max(np.abs(sums - 1.0))) / np.spacing(1.0))
    ok = row_sums_exact and linear_exact and worst_ulp <= 4
    report(6, "structural-map laws", ok,
           f"avg-pool rows sum to 1 exactly on emitted maps={row_sums_exact}, linear t2p == t2q exactly="
           f"{linear_exact}, {checked} steps; sweep to 32x32: {inexact}/{rows} rows off by <= {worst_ulp:.0f} ulp")


def test_c07_convergence_direction(report, task, tmp_path_factory):
    seeds, steps = range(5), 500
    study = convergence_study(task, ("avgpool", "resampler"), seeds, steps, lr=0.3, stages=1)
    out = tmp_path_factory.mktemp("convergence") / "curves.csv"
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["projector", "seed", "step", "loss"])
        for kind in ("avgpool", "resampler"):
            for seed, curve in zip(seeds, study[kind]["curves"]):
                writer.writerows([kind, seed, i + 1, f"{v:.17g}"] for i, v in enumerate(curve))
    avg = sorted(study["avgpool"]["steps_to_threshold"])
    res = sorted(study["resampler"]["steps_to_threshold"])
    mid = len(res) // 2
    # one seed of slack: compare against the next order statistic above the resampler median
    ok = avg[mid] <= res[mid + 1]
    report(7, "convergence analogue", ok,
           f"threshold {study['threshold']:.4f}; steps-to-threshold avgpool {avg} (median {avg[mid]}), "
           f"resampler {res} (median {res[mid]}, slack bound {res[mid + 1]}); curves {out}")


def test_c08_raw_attention_differs(report, task, trained_resampler):
    image, caption = task.sample(np.random.default_rng(42))
    rec = trained_resampler.generate(image, task.prompt_ids(), 16, text_ids=task.vocab.encode(caption))
    ours = rgae.explain(rec)
    raw = rgae.raw_attention_baseline(rec)
    l1 = float(np.abs(ours.text_to_patch - raw.text_to_patch).sum())
    for name, res in (("acceptance_rgae_t2p.pgm", ours), ("acceptance_raw_t2p.pgm", raw)):
        check_golden(name, render.encode_pgm(render.heatmap_image(res.text_to_patch)))
    report(8, "raw attention vs relevance", l1 > 1e-6,
           f"caption {caption!r}, L1 distance {l1:.4f}, both maps match golden images")


def test_c09_formats(report, tmp_path):
    rng = np.random.default_rng(9)
    roundtrips = 0
    for i in range(200):
        ndim = int(rng.integers(0, 4))
        shape = tuple(int(s) for s in rng.integers(0, 5, size=ndim))
        dtype = np.float32 if i % 3 == 0 else np.float64
        tensors = {f"m{j}/{j}/map": rng.normal(size=shape).astype(dtype) for j in range(int(rng.integers(1, 4)))}
        traceio.write_trace(tmp_path / "t.rgae", tensors)
        back = traceio.read_trace(tmp_path / "t.rgae")
        roundtrips += all(back[k].tobytes() == v.astype(np.float64).tobytes() for k, v in tensors.items())
    values = np.linspace(0, 1, 16) ** 2
    a = render.render_patch_map(values, tmp_path / "a.ppm").read_bytes()
    b = render.render_patch_map(values, tmp_path / "b.ppm").read_bytes()
    from test_render import FIXED

    for name, kwargs in (("fixed_gray.pgm", {}), ("fixed_color.ppm", {"color": True})):
        px = render.heatmap_image(FIXED, **kwargs)
        check_golden(name, render.encode_ppm(px) if px.ndim == 3 else render.encode_pgm(px))
    ok = roundtrips == 200 and a == b
    report(9, "formats", ok, f"{roundtrips}/200 trace roundtrips bit-identical, repeat render identical={a == b}, "
                             f"golden PGM/PPM match")


def test_c10_two_stage_contract(report, task, tmp_path):
    model = make_model("resampler", 4, seed=7)
    initial = {k: p.data.copy() for k, p in model.params.items()}
    after = {}
    two = train(model, task, stages=2, steps=60, lr=0.3,
                on_stage_end=lambda s, m: after.__setitem__(s, {k: p.data.copy() for k, p in m.params.items()}))
    frozen = all(np.array_equal(after[1][k], initial[k]) for k in initial if not k.startswith("projector/"))
    moved = any(not np.array_equal(after[1][k], initial[k]) for k in model.group("projector"))
    encoder_frozen = all(np.array_equal(after[2][k], initial[k]) for k in model.group("encoder"))
    one = train(make_model("resampler", 4, seed=7), task, stages=1, steps=60, lr=0.3)
    headers = []
    for name, res in (("one", one), ("two", two)):
        path = tmp_path / f"loss_{name}.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["step", "stage", "loss"])
            writer.writerows(res.to_rows())
        headers.append(path.read_text().splitlines()[0])
    ok = frozen and moved and encoder_frozen and headers[0] == headers[1] and all(
        np.isfinite(r.losses).all() for r in (one, two))
    report(10, "two-stage contract", ok,
           f"decoder bit-identical after stage 1={frozen}, projector updated={moved}, "
           f"encoder frozen={encoder_frozen}; final loss one-stage {one.losses[-1]:.3f} ({len(one.losses)} steps), "
           f"two-stage {two.losses[-1]:.3f} ({len(two.losses)} steps)")
