"""Acceptance criteria 1-10.

Each test records a one-line verdict through the ``acceptance_log`` fixture;
the lines are printed in the pytest terminal summary. Criteria 8 and 9 train
the bundled smoke configuration end to end through the command line and take
a few minutes.
"""

import re
import time
from pathlib import Path

import numpy as np
import pytest

from _oracles import enumerate_paths, random_fst
from dcae import cli
from dcae.corpus import load_manifest
from dcae.eval import frame_accuracy, relative_change, report
from dcae.graph import (Fst, NoAcceptingPathError, Topology, build_denominator,
                        build_numerator, chain_alignment, estimate_phone_lm, forward_backward)
from dcae.loss import LossWeights, lfmmi, total_loss
from dcae.model import Model, ModelConfig, load_model, strip_decoders
from dcae.net import CodeLayout, UNetMode
from dcae.train import grad_check, grad_check_case, read_history


REPO = Path(__file__).resolve().parents[1]
KINDS = ("baseline", "c_dcae", "pc_dcae", "hc_dcae")
UNET_MODES = ("none", "sum", "concat", "diff_concat")


# --------------------------------------------------------------------------
# Independent oracles


def torch_mmi(logits: np.ndarray, num: Fst, den: Fst):
    """F = log Z_num - log Z_den in the probability domain, differentiated by autograd."""
    torch = pytest.importorskip("torch")
    x = torch.tensor(logits, dtype=torch.float64, requires_grad=True)

    def log_z(fst):
        src = torch.tensor(fst.src)
        dst = torch.tensor(fst.dst)
        lab = torch.tensor(fst.label)
        w = torch.tensor(fst.weight)
        final = torch.exp(torch.tensor(fst.final))
        v = torch.zeros(fst.num_states, dtype=torch.float64)
        v[fst.start] = 1.0
        for t in range(x.shape[0]):
            flow = v[src] * torch.exp(w + x[t, lab])
            v = torch.zeros(fst.num_states, dtype=torch.float64).index_add(0, dst, flow)
        return torch.log(v @ final)

    F = log_z(num) - log_z(den)
    F.backward()
    return F.item(), x.grad.numpy()


def random_chain_instance(rng):
    """Random phone-LM denominator, a consistent alignment and its numerator."""
    P = int(rng.integers(2, 5))
    topo = Topology(P)
    seqs = [list(rng.integers(0, P, int(rng.integers(1, 5)))) for _ in range(6)]
    den = build_denominator(estimate_phone_lm(seqs, P), topo)
    labels = []
    while len(labels) < int(rng.integers(3, 11)):
        p = int(rng.integers(P))
        labels += [2 * p] + [2 * p + 1] * int(rng.integers(0, 3))
    num = build_numerator(labels, den)
    logits = rng.normal(size=(len(labels), topo.num_senones)) * 2.0
    return logits, num, den


# --------------------------------------------------------------------------
# Criteria 1-7


class TestOracleCriteria:
    def test_c01_forward_backward_matches_enumeration(self, acceptance_log):
        rng = np.random.default_rng(20240601)
        t0 = time.perf_counter()
        checked = attempts = 0
        worst_z = worst_g = 0.0
        while checked < 500:
            attempts += 1
            assert attempts < 5000
            S = int(rng.integers(1, 5))
            fst = random_fst(rng, num_senones=S)
            ll = rng.normal(size=(int(rng.integers(1, 9)), S)) * 2.0
            ref = enumerate_paths(fst, ll)
            if ref is None:
                with pytest.raises(NoAcceptingPathError):
                    forward_backward(fst, ll)
                continue
            logz, gamma = forward_backward(fst, ll)
            worst_z = max(worst_z, abs(logz - ref[0]))
            worst_g = max(worst_g, float(np.max(np.abs(gamma - ref[1]))))
            checked += 1
        elapsed = time.perf_counter() - t0
        ok = worst_z <= 1e-9 and worst_g <= 1e-9 and elapsed <= 30
        acceptance_log[1] = (ok, f"{checked} Fsts; max |dlogZ|={worst_z:.1e}, "
                                 f"max |dgamma|={worst_g:.1e}; {elapsed:.1f}s")
        assert ok

    def test_c02_gradient_suite(self, acceptance_log):
        t0 = time.perf_counter()
        worst = (0.0, "")
        failures = []
        for kind in KINDS:
            for mode in UNET_MODES:
                model, utt, targets, den = grad_check_case(kind, mode, 0.5, num_frames=6)
                assert utt.num_frames == 6
                rep = grad_check(model, utt, targets, den, LossWeights(), eps=1e-5)
                name, err = rep.worst
                if err > worst[0]:
                    worst = (err, f"{kind}/{mode}/{name}")
                if not rep.passed:
                    failures.append(f"{kind}/{mode}: {rep.failing}")
        elapsed = time.perf_counter() - t0
        ok = not failures and elapsed <= 300
        acceptance_log[2] = (ok, f"16 kind x U-Net cases; worst rel err {worst[0]:.1e} "
                                 f"({worst[1]}); {elapsed:.1f}s")
        assert not failures, failures
        assert elapsed <= 300

    def test_c03_chain_gradient_identity(self, acceptance_log):
        rng = np.random.default_rng(3)
        worst = 0.0
        for _ in range(100):
            logits, num, den = random_chain_instance(rng)
            F, grad = lfmmi(logits, num, den)
            F_ref, grad_ref = torch_mmi(logits, num, den)
            assert F == pytest.approx(F_ref, abs=1e-10)
            worst = max(worst, float(np.max(np.abs(grad - grad_ref))))
        acceptance_log[3] = (worst <= 1e-10, f"100 instances vs autograd; max |diff|={worst:.1e}")
        assert worst <= 1e-10

    def test_c04_trivial_mmi(self, acceptance_log):
        rng = np.random.default_rng(4)
        worst = 0.0
        for _ in range(50):
            logits, _, den = random_chain_instance(rng)
            F, grad = lfmmi(logits, den, den)
            worst = max(worst, abs(F), float(np.max(np.abs(grad))))
        acceptance_log[4] = (worst <= 1e-12, f"numerator == denominator; max |F|,|grad|={worst:.1e}")
        assert worst <= 1e-12

    def test_c05_objective_composition_bitwise(self, acceptance_log):
        rng = np.random.default_rng(5)
        mismatches = 0
        for _ in range(1000):
            F, ce, rc, rs = rng.normal(scale=50, size=4)
            ce, rc, rs = abs(ce), abs(rc), abs(rs)
            alpha, beta = rng.uniform(0, 2, size=2)
            parts = total_loss(-F, ce, rc, rs, LossWeights(alpha, beta, 5.0))
            expected = -F + 5 * ce + alpha * rc + beta * rs
            mismatches += parts.total != expected
        acceptance_log[5] = (mismatches == 0, f"1000 random part sets; {mismatches} mismatches")
        assert mismatches == 0

    def test_c06_strip_decoders_preserves_logits(self, acceptance_log):
        rng = np.random.default_rng(6)
        layouts = {"c_dcae": CodeLayout(8, 0, 4), "pc_dcae": CodeLayout(8, 6, 4),
                   "hc_dcae": CodeLayout(8, 6, 4, 10)}
        models = []
        for kind, lay in layouts.items():
            for mode in UNET_MODES:
                cfg = ModelConfig(kind=kind, feat_dim=7, spk_dim=3, num_senones=8, hidden_dim=12,
                                  bottleneck_dim=5, encoder_depth=4,
                                  encoder2_depth=1 if kind == "hc_dcae" else 0,
                                  code_layout=lay, unet=UNetMode(mode, 0.7), seed=len(models))
                full = Model(cfg)
                models.append((full, strip_decoders(full)))
        differ = 0
        for i in range(100):
            full, stripped = models[i % len(models)]
            T = int(rng.integers(4, 40))
            x, spk = rng.normal(size=(T, 7)), rng.normal(size=3)
            differ += not np.array_equal(full.forward(x, spk).senone_logits,
                                         stripped.forward(x, spk).senone_logits)
        acceptance_log[6] = (differ == 0, f"100 utterances over 3 kinds x 4 U-Net modes; "
                                          f"{differ} differ")
        assert differ == 0


# (baseline WER, system WER, printed relative change) for every cell of the two tables.
TABLE1 = [
    (4.42, 3.96, 10.41), (2.53, 2.30, 9.09), (4.42, 4.02, 9.05), (2.53, 2.34, 7.51),
    (4.42, 3.96, 10.41), (2.53, 2.30, 9.09), (4.42, 4.02, 9.05), (2.53, 2.41, 4.74),
    (4.42, 4.09, 7.47), (2.53, 2.29, 9.49), (4.42, 4.04, 8.60), (2.53, 2.30, 9.09),
    (4.42, 3.93, 11.09), (2.53, 2.27, 10.28), (4.42, 4.01, 9.28), (2.53, 2.36, 6.72),
]
TABLE2_BASELINES = {"tdnnf": (1.91, 3.69, 3.42, 10.31, 6.38),
                    "cnn": (1.72, 3.19, 3.40, 9.48, 5.80)}
TABLE2_ROWS = {
    "tdnnf": [
        ((1.70, 3.50, 3.16, 10.22, 6.23), (10.99, 5.15, 7.60, 0.87, 2.35)),
        ((1.66, 3.47, 3.21, 10.29, 6.25), (13.09, 5.96, 6.14, 0.19, 2.04)),
        ((1.81, 3.63, 3.31, 10.37, 6.37), (5.24, 1.63, 6.14, -0.58, 0.16)),
        ((1.70, 3.53, 3.03, 10.25, 6.24), (10.99, 4.34, 11.40, 0.58, 2.19)),
        ((1.61, 3.50, 3.14, 10.19, 6.21), (15.71, 5.15, 8.19, 1.16, 2.66)),
        ((1.66, 3.53, 3.29, 10.36, 6.31), (13.09, 4.34, 3.80, -0.48, 1.10)),
        ((1.77, 3.55, 3.42, 10.29, 6.30), (7.33, 3.79, 0.00, 0.19, 1.25)),
        ((1.74, 3.55, 3.06, 10.04, 6.17), (8.90, 3.79, 10.53, 2.62, 3.29)),
    ],
    "cnn": [
        ((1.57, 3.19, 3.03, 9.04, 5.57), (8.72, 0.00, 10.88, 4.64, 3.97)),
        ((1.63, 3.19, 3.10, 8.93, 5.53), (5.23, 0.00, 8.82, 5.80, 4.66)),
        ((1.64, 3.20, 2.86, 9.05, 5.57), (4.65, -0.31, 15.88, 4.54, 3.97)),
        ((1.59, 3.26, 2.99, 8.83, 5.51), (7.56, -2.19, 12.06, 6.86, 5.00)),
        ((1.63, 3.21, 2.67, 8.82, 5.46), (5.23, -0.63, 21.47, 6.96, 5.86)),
        ((1.57, 3.27, 2.86, 8.97, 5.56), (8.72, -2.51, 15.88, 5.38, 4.14)),
        ((1.72, 3.19, 3.10, 8.94, 5.54), (0.00, 0.00, 8.82, 5.70, 4.48)),
        ((1.59, 3.26, 2.93, 8.91, 5.54), (7.56, -2.19, 13.82, 6.01, 4.48)),
    ],
}


# The one printed cell that no arithmetic on its WER columns reproduces.
KNOWN_ERRATUM = (3.42, 3.31, 6.14, 3.22)


def table_pairs():
    pairs = list(TABLE1)
    for enc, rows in TABLE2_ROWS.items():
        base = TABLE2_BASELINES[enc]
        for wers, rels in rows:
            pairs += list(zip(base, wers, rels))
    return pairs


class TestTableFixtures:
    def test_c07_relative_changes(self, acceptance_log):
        conds = ("A", "B", "C", "D", "Average")
        counts = dict.fromkeys(conds[:4], 1)
        cells = []  # (baseline, system, printed, computed by report())
        for enc, rows in TABLE2_ROWS.items():
            base = TABLE2_BASELINES[enc]
            b = report("baseline", dict(zip(conds, base[:4])), counts, average=base[4])
            for wers, rels in rows:
                r = report("sys", dict(zip(conds, wers[:4])), counts, baseline=b,
                           average=wers[4])
                cells += [(bw, sw, rel, r.rel_change[c])
                          for c, bw, sw, rel in zip(conds, base, wers, rels)]
        for base, sys_, rel in TABLE1:
            r = report("sys", {"dev": sys_}, {"dev": 1},
                       baseline=report("baseline", {"dev": base}, {"dev": 1}))
            cells.append((base, sys_, rel, r.rel_change["dev"]))
        bad = [(b, s, p, round(g, 2)) for b, s, p, g in cells if abs(g - p) > 0.01]
        worst = max(abs(g - p) for _, _, p, g in cells)
        ok = not bad
        acceptance_log[7] = (ok, f"{len(cells) - len(bad)}/{len(cells)} table cells within 0.01; "
                                 f"unreproducible (baseline, system, printed, computed): {bad}"
                             if bad else f"{len(cells)} table cells; max |diff|={worst:.4f}")
        if bad == [KNOWN_ERRATUM]:
            pytest.xfail(f"printed relative change inconsistent with its WERs: {KNOWN_ERRATUM}")
        assert ok, bad

    def test_consistent_cells_reproduced(self):
        for base, sys_, rel in table_pairs():
            if (base, sys_, rel) == KNOWN_ERRATUM[:3]:
                continue
            assert relative_change(base, sys_) == pytest.approx(rel, abs=0.01), (base, sys_)

    def test_known_erratum(self):
        # Table 2, TDNN-F pc-DcAE + concat, set C: 3.31 gives 3.22, not the printed 6.14.
        # The printed value matches the 3.21 of the row above.
        base, sys_, printed, computed = KNOWN_ERRATUM
        assert relative_change(base, sys_) == pytest.approx(computed, abs=0.005)
        assert relative_change(base, 3.21) == pytest.approx(printed, abs=0.01)

    def test_quoted_examples(self):
        assert relative_change(4.42, 3.93) == pytest.approx(11.09, abs=0.01)
        assert relative_change(2.53, 2.27) == pytest.approx(10.28, abs=0.01)
        assert relative_change(5.80, 5.46) == pytest.approx(5.86, abs=0.01)


# --------------------------------------------------------------------------
# Criteria 8-9: smoke configuration end to end


def _dcae(*args):
    code = cli.main([str(a) for a in args])
    assert code == 0, f"dcae {' '.join(map(str, args))} exited {code}"


SYSTEMS = [("c_dcae", "none")] + [(k, m) for k in ("pc_dcae", "hc_dcae") for m in UNET_MODES]


def smoke_run(root: Path) -> float:
    """Corpus, c-DcAE pipeline and pc/hc trainings under ``root``; returns seconds."""
    t0 = time.perf_counter()
    corpus = root / "corpus"
    _dcae("gen-corpus", "--config", "smoke", "--out", corpus)
    for kind, mode in SYSTEMS:
        _dcae("train", "--config", "smoke", "--set", f"corpus_dir={corpus}",
              "--set", f"model.kind={kind}", "--set", f"model.unet.mode={mode}",
              "--out", root / f"{kind}-{mode}")
    scps = [corpus / f"test_{c}.scp" for c in "ABCD"]
    hyp = root / "c_dcae.hyp"
    _dcae("decode", "--checkpoint", root / "c_dcae-none" / "final.mdl",
          *[a for s in scps for a in ("--manifest", s)], "--out", hyp)
    _dcae("report", "--hyp", f"c_dcae={hyp}", *[a for s in scps for a in ("--ref", s)],
          "--history", root / "c_dcae-none" / "history.csv", "--out", root / "report")
    return time.perf_counter() - t0


@pytest.fixture(scope="module")
def smoke_runs(tmp_path_factory):
    first = tmp_path_factory.mktemp("smoke1")
    second = tmp_path_factory.mktemp("smoke2")
    return (first, smoke_run(first)), (second, smoke_run(second))


@pytest.mark.slow
class TestSmokeEndToEnd:
    def test_c08_smoke_training(self, smoke_runs, acceptance_log):
        (root, elapsed), _ = smoke_runs
        model = strip_decoders(load_model(root / "c_dcae-none" / "final.mdl"))
        f = model.config.subsample_factor
        accs, frames = [], []
        for u in load_manifest(root / "corpus" / "test_A.scp"):
            labels = chain_alignment(u.alignment, f)
            accs.append(frame_accuracy(model.forward(u.noisy, u.spk_embed).senone_logits, labels))
            frames.append(len(labels))
        acc = float(np.average(accs, weights=frames))
        hist = read_history(root / "c_dcae-none" / "history.csv")
        drop = 1 - hist[-1].total / hist[0].total
        faults = []
        for kind, mode in SYSTEMS[1:]:
            h = read_history(root / f"{kind}-{mode}" / "history.csv")
            if len(h) != 15 or not all(np.isfinite(x.total) for x in h):
                faults.append(f"{kind}/{mode}")
        assert (root / "report" / "report.csv").exists()
        ok = acc >= 90.0 and drop >= 0.5 and not faults and elapsed <= 600
        acceptance_log[8] = (ok, f"c-DcAE test-A frame acc {acc:.2f}%, loss drop {100 * drop:.1f}%; "
                                 f"pc/hc x 4 U-Net modes faults: {faults or 'none'}; "
                                 f"{elapsed:.0f}s per run")
        assert acc >= 90.0
        assert drop >= 0.5
        assert not faults
        assert elapsed <= 600

    def test_c09_determinism(self, smoke_runs, acceptance_log):
        (a, _), (b, _) = smoke_runs
        names = ["c_dcae.hyp", "report/report.csv"]
        for kind, mode in SYSTEMS:
            names += [f"{kind}-{mode}/history.csv", f"{kind}-{mode}/final.mdl"]
        names += [p.relative_to(a).as_posix() for p in sorted((a / "corpus").rglob("*"))
                  if p.is_file()]
        differ = [n for n in names if (a / n).read_bytes() != (b / n).read_bytes()]
        acceptance_log[9] = (not differ, f"{len(names)} files compared across two runs; "
                                         f"{len(differ)} differ")
        assert not differ


class TestReadme:
    def test_c10_readme_states_non_reproducibility(self, acceptance_log):
        text = (REPO / "README.md").read_text(encoding="utf-8")
        flat = re.sub(r"\s+", " ", text).lower()
        ok = ("not reproducible" in flat and all(v in text for v in ("4.42", "2.53", "6.38", "5.80"))
              and "criteria 1-9" in flat)
        acceptance_log[10] = (ok, "README states the published absolute WERs are not reproducible")
        assert ok
