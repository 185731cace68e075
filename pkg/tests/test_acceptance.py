"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the verdict lines.
"""

import dataclasses
import itertools
import time

import numpy as np
import pytest
import torch

from fgzsl.alignment import (
    MixedBatch,
    PAModel,
    PATrainConfig,
    PATrainer,
    dual_domain_cls_loss,
    indomain_contrastive_loss,
    init_bank,
    pa_losses,
    update_prototype,
)
from fgzsl.bench import BENCH_PA, ablation_sweep, derive_seed, synth_bench
from fgzsl.contrastive import ClassDescriptor, export_descriptors, import_descriptors, supcon_loss
from fgzsl.data import SyntheticSpec, generate_synthetic
from fgzsl.encoder import finite_difference_check, flat_parameters, functional_loss, l2_normalize
from fgzsl.evaluation import (
    PredictionSet,
    evaluate,
    harmonic_mean,
    hierarchical_accuracy,
    hop_breakdown,
    per_class_topk,
)
from fgzsl.taxonomy import make_split, random_taxonomy


def verdict(n, ok, detail):
    print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'} - {detail}")
    return ok


def unit_bank(rng, k, d, domain="source", labels=None):
    bank = init_bank(domain, [f"c{i}" for i in range(k)], d, labels=labels)
    for i, v in enumerate(l2_normalize(rng.standard_normal((k, d)))):
        update_prototype(bank, i if labels is None else labels[i], torch.as_tensor(v))
    return bank


# 1 ---------------------------------------------------------------------------

def test_criterion_1_gradients():
    t0 = time.time()
    worst = {"supcon": 0.0, "in-domain": 0.0, "dual": 0.0, "total": 0.0}
    y = torch.tensor([0, 0, 1, 1, 2, 2])
    for seed in range(10):
        rng = np.random.default_rng(seed)
        raw = rng.standard_normal(6 * 8)
        bank_s = unit_bank(rng, 3, 8)
        bank_x = unit_bank(rng, 2, 8, "target", labels=[0, 1])
        emb = lambda t: l2_normalize(t.view(6, 8))  # noqa: E731
        checks = {
            "supcon": lambda t: supcon_loss(emb(t), y, 0.1),
            "in-domain": lambda t: indomain_contrastive_loss(emb(t), y, bank_s, tau=0.1),
            "dual": lambda t: dual_domain_cls_loss(emb(t), y, bank_s, bank_x),
        }
        for name, f in checks.items():
            worst[name] = max(worst[name], finite_difference_check(f, raw, probes=10, seed=seed))
        torch.manual_seed(seed)
        cfg = PATrainConfig(embed_dim=8, hidden_dim=12, seed=seed)
        model = PAModel(5, 3, cfg).double()
        batch = MixedBatch(torch.as_tensor(rng.standard_normal((3, 5))), torch.tensor([0, 1, 2]),
                           torch.as_tensor(rng.standard_normal((3, 5))), torch.tensor([0, 1, 1]))
        total = functional_loss([model], lambda: pa_losses(model, bank_s, bank_x, batch, cfg)["total"])
        worst["total"] = max(worst["total"], finite_difference_check(total, flat_parameters(model),
                                                                     probes=10, seed=seed))
    elapsed = time.time() - t0
    ok = max(worst.values()) < 1e-4 and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    assert verdict(1, ok, f"max rel. error {detail}; {elapsed:.1f}s"), worst


# 2 ---------------------------------------------------------------------------

def brute_hop(lineage, y, seen):
    if y in seen:
        return 0
    levels = [lvl for s in seen for lvl in (1, 2, 3) if lineage[s][lvl - 1] == lineage[y][lvl - 1]]
    return min(levels, default=4)


def test_criterion_2_split_oracle():
    t0 = time.time()
    checked = mismatches = 0
    invariants = True
    for case in range(25):
        rng = np.random.default_rng(1000 + case)
        n = int(rng.integers(5, 201))
        tax = random_taxonomy(n, rng, int(rng.integers(1, 7)), int(rng.integers(1, 5)),
                              int(rng.integers(1, 5)), ragged=bool(case % 2))
        split = make_split(tax, int(rng.integers(1, n)), seed=case)
        sets = [split.seen, *split.hop_sets.values()]
        invariants &= all(a.isdisjoint(b) for a, b in itertools.combinations(sets, 2))
        invariants &= set().union(*sets) == set(tax.species)
        for y in tax.species:
            checked += 1
            mismatches += split.hop_of(y) != brute_hop(tax.lineage, y, split.seen)
    elapsed = time.time() - t0
    ok = mismatches == 0 and invariants and elapsed < 60
    assert verdict(2, ok, f"{checked} species over 25 taxonomies, {mismatches} mismatches, "
                          f"invariants {'hold' if invariants else 'broken'}; {elapsed:.1f}s")


# 3 ---------------------------------------------------------------------------

def test_criterion_3_metric_oracle():
    t0 = time.time()
    tax = random_taxonomy(60, np.random.default_rng(4), 4, 3, 3, ragged=True)
    rng = np.random.default_rng(0)
    split = next(s for s in (make_split(tax, 20, i) for i in range(200))
                 if all(s.hop_sets[h] for h in (1, 2, 3, 4)))
    classes = tax.species
    errors = []
    monotone = True
    for trial in range(5):
        true = [classes[i] for i in rng.integers(len(classes), size=1000)]
        ranked = []
        for t in true:
            r = [classes[j] for j in rng.permutation(len(classes))[:10]]
            if rng.random() < 0.4 and t not in r[:1]:
                r = [t] + [c for c in r if c != t][:9]
            ranked.append(tuple(r))
        preds = PredictionSet(tuple(map(str, range(1000))), tuple(true), tuple(ranked))
        for k in (1, 5, 10):
            # brute force: loop over samples, then average per class
            per = {}
            for t, r in zip(true, ranked):
                per.setdefault(t, []).append(t in r[:k])
            for subset in (sorted(split.unseen), sorted(split.seen)):
                present = [c for c in subset if c in per]
                expect = 100 * sum(sum(per[c]) / len(per[c]) for c in present) / len(present)
                errors.append(abs(per_class_topk(preds, present, k) - expect))
            hops = hop_breakdown(preds, split, k)
            for h, members in split.hop_sets.items():
                present = [c for c in members if c in per]
                expect = 100 * sum(sum(per[c]) / len(per[c]) for c in present) / len(present)
                errors.append(abs(hops[h] - expect))
        accs = [hierarchical_accuracy(preds, tax, lvl) for lvl in range(4)]
        monotone &= all(a <= b + 1e-12 for a, b in zip(accs, accs[1:]))
    h_ref = harmonic_mean(20.9, 12.2)
    trivial = harmonic_mean(37.0, 37.0) == pytest.approx(37.0) and harmonic_mean(50.0, 0.0) == 0.0
    elapsed = time.time() - t0
    ok = max(errors) < 1e-9 and abs(h_ref - 15.4) <= 0.05 and trivial and monotone and elapsed < 60
    assert verdict(3, ok, f"max recount error {max(errors):.1e}; H(20.9, 12.2) = {h_ref:.3f}; "
                          f"trivial cases {'ok' if trivial else 'wrong'}; hierarchy "
                          f"{'monotone' if monotone else 'NOT monotone'}; {elapsed:.1f}s")


# 4 ---------------------------------------------------------------------------

def test_criterion_4_prototype_dynamics():
    rng = np.random.default_rng(0)
    steps_needed = []
    for _ in range(20):
        start, target = l2_normalize(rng.standard_normal((2, 32)))
        bank = init_bank("source", ["a"], 32)
        update_prototype(bank, 0, torch.as_tensor(start))
        t = torch.as_tensor(target)
        n = next((i for i in range(1, 301)
                  if float(torch.linalg.vector_norm(update_prototype(bank, 0, t, m=0.9) - t)) < 1e-6), None)
        steps_needed.append(n)
    converged = all(n is not None for n in steps_needed)

    ds = generate_synthetic(SyntheticSpec(seed=derive_seed(0, "data")))
    trainer = PATrainer.for_data(ds.pa_data(), dataclasses.replace(BENCH_PA, seed=derive_seed(0, "train")))
    worst = [0.0]

    def check(tr, _):
        for bank in (tr.bank_s, tr.bank_x):
            norms = bank.prototypes[bank.initialized].norm(dim=1)
            worst[0] = max(worst[0], float((norms - 1).abs().max()))

    trainer.fit(ds.pa_data(), on_step=check)
    ok = converged and worst[0] < 1e-6
    assert verdict(4, ok, f"constant-input convergence in <= {max(n or 999 for n in steps_needed)} "
                          f"steps (limit 300); max | ||phi|| - 1 | over {trainer.iteration} training "
                          f"steps = {worst[0]:.1e}")


# 5 ---------------------------------------------------------------------------

def test_criterion_5_synthetic_gzsl():
    t0 = time.time()
    result = synth_bench(SyntheticSpec(), seed=0)
    elapsed = time.time() - t0
    spec = result["spec"]
    pa, base = (result["methods"][m]["topk"]["1"] for m in ("PA", "photos-only"))
    chance = result["chance"]
    shape_ok = (spec["num_classes"], spec["seen_count"], spec["latent_dim"], spec["obs_dim"]) == (30, 20, 32, 64)
    checks = {
        "a": pa["U"] >= 10.0,
        "b": base["U"] <= 3.4,
        "c": pa["S"] >= 60.0,
    }
    ok = all(checks.values()) and shape_ok and elapsed < 300
    assert verdict(5, ok, f"chance {chance:.2f}%; (a) PA U={pa['U']:.1f} (>= 10); (b) photos-only "
                          f"U={base['U']:.1f} (<= 3.4); (c) PA S={pa['S']:.1f} (>= 60); "
                          f"{elapsed:.1f}s"), (pa, base)


# 6 ---------------------------------------------------------------------------

def test_criterion_6_ablation_direction():
    t0 = time.time()
    sweep = ablation_sweep(range(5), "FCA")
    margins = {row: [sweep[s]["F"]["U"] - sweep[s][row]["U"] for s in sweep] for row in "CA"}
    ok = all(m > 0 for ms in margins.values() for m in ms)
    detail = "; ".join(f"F - {row} unseen margin per seed " + ", ".join(f"{m:+.1f}" for m in ms)
                       for row, ms in margins.items())
    assert verdict(6, ok, f"{detail}; {time.time() - t0:.1f}s"), margins


# 7 ---------------------------------------------------------------------------

def test_criterion_7_determinism(tmp_path):
    tax = random_taxonomy(150, np.random.default_rng(3), 5, 3, 3, ragged=True)
    same = {}
    for run in ("a", "b"):
        d = tmp_path / run
        d.mkdir()
        make_split(tax, 60, 11).save(d / "split.json")
        rng = np.random.default_rng(5)
        desc = [ClassDescriptor(f"c{i}", l2_normalize(rng.standard_normal(16))) for i in range(40)]
        export_descriptors(desc, d / "desc.csv")
        export_descriptors(desc, d / "desc.bin")
        split = make_split(tax, 60, 11)
        scores = np.random.default_rng(6).standard_normal((300, len(tax)))
        labels = np.random.default_rng(7).integers(len(tax), size=300)
        preds = PredictionSet.from_scores(scores, labels, tax.species)
        evaluate(preds, split, tax).save(d / "report.json")
    for f in ("split.json", "desc.csv", "desc.bin", "report.json"):
        same[f] = (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    errs = {}
    for f in ("desc.csv", "desc.bin"):
        back = import_descriptors(tmp_path / "a" / f)
        errs[f] = max(float(np.abs(a.vector - b.vector).max()) for a, b in zip(desc, back))

    ds = generate_synthetic(SyntheticSpec(seed=1))
    cfg = dataclasses.replace(BENCH_PA, iterations=30)
    tr = PATrainer.for_data(ds.pa_data(), cfg)
    tr.fit(ds.pa_data())
    tr.save(tmp_path / "ck.pt")
    back = PATrainer.load(tmp_path / "ck.pt")
    errs["checkpoint"] = max(
        float((flat_parameters(tr.model) - flat_parameters(back.model)).abs().max()),
        float((tr.bank_s.prototypes - back.bank_s.prototypes).abs().max()),
        float((tr.bank_x.prototypes - back.bank_x.prototypes).abs().max()),
    )
    ok = all(same.values()) and max(errs.values()) <= 1e-7
    assert verdict(7, ok, "byte-identical: " + ", ".join(f"{k} {'yes' if v else 'NO'}" for k, v in same.items())
                   + "; round-trip max error: " + ", ".join(f"{k} {v:.1e}" for k, v in errs.items()))
