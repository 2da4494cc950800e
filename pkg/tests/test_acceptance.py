"""End-to-end acceptance checks.

Each test exercises one headline guarantee of the package at its stated
tolerance and records a PASS/FAIL line through the `acceptance` fixture;
the collected lines are printed as a summary block at the end of the
pytest run.  The trained-model checks share the session-scoped fixtures
from conftest.py.
"""

import itertools
import math
import time

import numpy as np
import pytest

from dplx import tensor as T
from dplx.blocks import EVAL, SplitState, stack_forward, stack_reverse
from dplx.data import generate_corpus
from dplx.decoding import (evaluate_translation,
                           representation_roundtrip_error, roundtrip_eval)
from dplx.diffusion import PRESETS, posterior_step, preset, q_sample
from dplx.errors import InfeasibleAlignmentError
from dplx.gradcheck import check_gradients
from dplx.losses import LossWeights, composite_loss, ctc_loss, required_frames
from dplx.model import ModelConfig, build_model, translate
from dplx.rng import RngHub
from dplx.tensor import Tensor
from dplx.training import (MetricsSink, TrainConfig, config_fingerprint,
                           run_stage, train)

# ----------------------------------------------------------------------
# 1. exact invertibility of the reversible stack


class TestInvertibility:
    GRID = list(itertools.product((2, 4, 8, 12), (32, 64), (8, 32)))

    def test_invertibility_grid(self, acceptance):
        start = time.monotonic()
        worst = {np.float64: 0.0, np.float32: 0.0}
        tol = {np.float64: 1e-8, np.float32: 1e-4}
        for draw in range(100):
            layers_n, width, frames = self.GRID[draw % len(self.GRID)]
            rng = np.random.default_rng(9000 + draw)
            with T.use_dtype(np.float64):
                cfg = ModelConfig(vocab=4, width=width, heads=4, kernel=7,
                                  upsample_kernel=4, max_len=frames,
                                  layers=layers_n)
                model = build_model(cfg, RngHub(9000 + draw))
            x = rng.standard_normal((2, frames, width))
            for dtype in (np.float64, np.float32):
                m = model if dtype is np.float64 else model.to_dtype(np.float32)
                xin = Tensor(x.astype(dtype), dtype=np.dtype(dtype))
                s, _ = stack_forward(SplitState.split(xin), m.layers, m.rdc, EVAL)
                s, _ = stack_reverse(s, m.layers, m.rdc, EVAL)
                err = float(np.abs(s.merged().data - xin.data).max())
                worst[dtype] = max(worst[dtype], err)
                assert err <= tol[dtype], (draw, layers_n, width, frames, dtype, err)
        elapsed = time.monotonic() - start
        ok = worst[np.float64] <= 1e-8 and worst[np.float32] <= 1e-4 and elapsed < 60
        acceptance(ok, "invertibility (100 draws, L in 2-12, h in 32/64, t in 8/32)",
                   f"max err double {worst[np.float64]:.2e} <= 1e-8, "
                   f"single {worst[np.float32]:.2e} <= 1e-4, {elapsed:.1f}s < 60s")


# ----------------------------------------------------------------------
# 2. the two directions execute mirror-image sub-module chains


class TestPalindrome:
    def test_traces_are_exact_reverses(self, acceptance):
        results = []
        for layers_n in (2, 4, 6, 8, 12):
            cfg = ModelConfig(vocab=4, width=8, heads=2, kernel=3,
                              upsample_kernel=4, max_len=4, layers=layers_n)
            model = build_model(cfg, RngHub(layers_n))
            x = Tensor(np.random.default_rng(layers_n).standard_normal((1, 4, 8)),
                       dtype=np.dtype(np.float32))
            tf, tr = [], []
            stack_forward(SplitState.split(x), model.layers, model.rdc, EVAL, trace=tf)
            stack_reverse(SplitState.split(x), model.layers, model.rdc, EVAL, trace=tr)
            fwd, rev = "".join(tf), "".join(tr)
            assert set(fwd) <= set("fmc") and len(fwd) == 4 * layers_n
            assert fwd == rev[::-1], (layers_n, fwd, rev)
            results.append(layers_n)
        acceptance(True, "palindrome traces (f-to and f-from are string reverses)",
                   f"L in {results}, alphabet fmc")


# ----------------------------------------------------------------------
# 3. CTC dynamic program equals exhaustive alignment enumeration


def _collapse(path, blank):
    out, prev = [], None
    for s in path:
        if s != prev and s != blank:
            out.append(s)
        prev = s
    return tuple(out)


def _enumeration_table(lp, blank):
    table = {}
    for path in itertools.product(range(lp.shape[1]), repeat=lp.shape[0]):
        key = _collapse(path, blank)
        score = sum(lp[t, c] for t, c in enumerate(path))
        table[key] = np.logaddexp(table.get(key, -np.inf), score)
    return table


class TestCtcOracle:
    def test_full_grid_and_hand_values(self, acceptance):
        worst, checked, infeasible = 0.0, 0, 0
        for vocab in (1, 2, 3):
            for frames in range(1, 7):
                rng = np.random.default_rng(300 + 17 * vocab + frames)
                x = rng.standard_normal((frames, vocab + 1))
                lp = x - np.log(np.exp(x).sum(-1, keepdims=True))
                table = _enumeration_table(lp, blank=vocab)
                for u in range(0, 4):
                    for labels in itertools.product(range(vocab), repeat=u):
                        if required_frames(labels) > frames:
                            assert labels not in table
                            with pytest.raises(InfeasibleAlignmentError):
                                ctc_loss(Tensor(lp, dtype=np.float64),
                                         list(labels), blank=vocab)
                            infeasible += 1
                            continue
                        got = ctc_loss(Tensor(lp, dtype=np.float64),
                                       list(labels), blank=vocab).item()
                        err = abs(got - (-table[labels]))
                        worst = max(worst, err)
                        assert err <= 1e-10, (vocab, frames, labels, err)
                        checked += 1

        # hand analytics on uniform scores: one frame, two classes, one
        # label -> -log(1/2); two frames -> paths (y,y),(y,-),(-,y) -> -log(3/4)
        one = ctc_loss(Tensor(np.log(np.full((1, 2), 0.5)), dtype=np.float64),
                       [0], blank=1).item()
        two = ctc_loss(Tensor(np.log(np.full((2, 2), 0.5)), dtype=np.float64),
                       [0], blank=1).item()
        hand_ok = (f"{one:.15f}" == f"{math.log(2.0):.15f}"
                   and f"{two:.15f}" == f"{-math.log(0.75):.15f}")
        assert hand_ok, (one, two)
        acceptance(worst <= 1e-10 and hand_ok,
                   "ctc oracle (full grid T<=6, |V|<=3, |y|<=3 vs enumeration)",
                   f"{checked} feasible cases max err {worst:.1e} <= 1e-10, "
                   f"{infeasible} infeasible rejected, hand values ln2 / -ln0.75 exact")


# ----------------------------------------------------------------------
# 4. finite-difference certification of every differentiable operation
#    and of the full composite objective


def _op_specs(rng):
    """(name, f, leaves) triples; every f rebuilds its graph per call."""
    p = lambda *shape: T.parameter(rng.standard_normal(shape))
    x34, y34 = p(3, 4), p(3, 4)
    pos = T.parameter(rng.standard_normal((3, 4)) ** 2 + 0.5)
    xg = p(2, 6)
    x234 = p(2, 3, 4)
    w45, b5 = p(4, 5), p(5)
    mm_a, mm_b = p(2, 3, 4), p(2, 4, 5)
    softmax_mask = np.array([True, True, False, True])
    g4, be4 = p(4), p(4)
    bn_x = p(2, 3, 4)
    dw = p(4, 3)
    pw_w, pw_b = p(4, 6), p(6)
    ct_w, ct_b = p(4, 4, 4), p(4)
    table = p(5, 4)
    bias_table = p(2, 6)
    ids = np.array([[0, 3], [4, 1]])
    bidx = np.array([[0, 2], [4, 1]])
    c_proj = rng.standard_normal((3, 4))

    def s(t):
        return T.reduce_sum(T.mul(t, c_proj)) if t.shape == (3, 4) else T.reduce_sum(t)

    from dplx.tensor import BnState
    bn_state = BnState(4)

    def fixed_rng():
        return np.random.default_rng(77)

    return [
        ("add", lambda: s(T.add(x34, y34)), [x34, y34]),
        ("sub", lambda: s(T.sub(x34, y34)), [x34, y34]),
        ("mul", lambda: s(T.mul(x34, y34)), [x34, y34]),
        ("div", lambda: s(T.div(x34, pos)), [x34, pos]),
        ("neg", lambda: s(T.neg(x34)), [x34]),
        ("square", lambda: s(T.square(x34)), [x34]),
        ("sqrt", lambda: s(T.sqrt(pos)), [pos]),
        ("exp", lambda: s(T.exp(x34)), [x34]),
        ("log", lambda: s(T.log(pos)), [pos]),
        ("sigmoid", lambda: s(T.sigmoid(x34)), [x34]),
        ("silu", lambda: s(T.silu(x34)), [x34]),
        ("glu", lambda: T.reduce_sum(T.glu(xg)), [xg]),
        ("reshape", lambda: T.reduce_sum(T.square(T.reshape(x234, (6, 4)))), [x234]),
        ("swapaxes", lambda: T.reduce_sum(T.square(T.swapaxes(x234, 0, 2))), [x234]),
        ("narrow", lambda: T.reduce_sum(T.square(T.narrow(x234, 1, 1, 2))), [x234]),
        ("take_row", lambda: T.reduce_sum(T.square(T.take_row(x34, 1))), [x34]),
        ("concat", lambda: T.reduce_sum(T.square(T.concat([x34, y34], axis=0))),
         [x34, y34]),
        ("reduce_sum", lambda: T.reduce_sum(T.square(T.reduce_sum(x234, axis=1))),
         [x234]),
        ("reduce_mean", lambda: T.reduce_sum(T.square(T.reduce_mean(x234, axis=0))),
         [x234]),
        ("matmul", lambda: T.reduce_sum(T.square(T.matmul(mm_a, mm_b))),
         [mm_a, mm_b]),
        ("linear", lambda: T.reduce_sum(T.square(T.linear(x34, w45, b5))),
         [x34, w45, b5]),
        ("log_softmax", lambda: s(T.log_softmax(x34)), [x34]),
        ("masked_softmax",
         lambda: T.reduce_sum(T.square(T.masked_softmax(x234, softmax_mask))),
         [x234]),
        ("layer_norm", lambda: s(T.layer_norm(x34, g4, be4)), [x34, g4, be4]),
        ("batch_norm_train",
         lambda: T.reduce_sum(T.square(T.batch_norm(
             bn_x, g4, be4, bn_state, training=True, update_stats=False))),
         [bn_x, g4, be4]),
        ("batch_norm_eval",
         lambda: T.reduce_sum(T.square(T.batch_norm(
             bn_x, g4, be4, bn_state, training=False))),
         [bn_x, g4, be4]),
        ("dropout",
         lambda: T.reduce_sum(T.square(T.dropout(bn_x, 0.3, True, fixed_rng()))),
         [bn_x]),
        ("conv1d_depthwise",
         lambda: T.reduce_sum(T.square(T.conv1d_depthwise(bn_x, dw))), [bn_x, dw]),
        ("conv1d_pointwise",
         lambda: T.reduce_sum(T.square(T.conv1d_pointwise(bn_x, pw_w, pw_b))),
         [bn_x, pw_w, pw_b]),
        ("conv_transpose1d_double",
         lambda: T.reduce_sum(T.square(T.conv_transpose1d_double(bn_x, ct_w, ct_b))),
         [bn_x, ct_w, ct_b]),
        ("embedding", lambda: T.reduce_sum(T.square(T.embedding(table, ids))),
         [table]),
        ("rel_bias_lookup",
         lambda: T.reduce_sum(T.square(T.rel_bias_lookup(bias_table, bidx))),
         [bias_table]),
    ]


class TestGradientCertification:
    def test_every_op_and_composite(self, acceptance):
        start = time.monotonic()
        worst_op, worst_name = 0.0, ""
        with T.use_dtype(np.float64):
            rng = np.random.default_rng(400)
            for name, f, leaves in _op_specs(rng):
                err = check_gradients(f, leaves, rng, n_coords=6)
                if err > worst_op:
                    worst_op, worst_name = err, name
                assert err <= 1e-5, (name, err)

            # the full objective, probed through representative parameters
            # of every component it touches
            mcfg = ModelConfig(vocab=6, width=8, heads=2, kernel=3,
                               upsample_kernel=4, max_len=8, layers=2)
            model = build_model(mcfg, RngHub(5))
            brng = np.random.default_rng(41)
            src = brng.integers(0, 6, size=(2, 4))
            tgt = brng.integers(0, 6, size=(2, 4))
            sm = np.ones((2, 4), dtype=bool)
            sm[0, 3] = False
            tm = np.ones((2, 4), dtype=bool)
            with T.no_grad():
                rf = translate(model, src, sm, "fwd", EVAL, collect=True)
                rr = translate(model, tgt, tm, "rev", EVAL, collect=True)
            refs = (rf.states, list(reversed(rr.states)))
            w = LossWeights(1, 1, 1, 1, 1, 1)
            params = model.named_params()
            leaves = [params["enc_x.table"], params["up_y.w"],
                      params["layers.0.mhsa.wq"], params["layers.1.cnn.dw"],
                      params["layers.0.ffn_b.w2"], params["head_y.w"],
                      params["head_x.b"]]

            def f():
                loss, _ = composite_loss(model, src, sm, tgt, tm, w, None,
                                         dropout=False, agreement_refs=refs)
                return loss

            comp_err = check_gradients(f, leaves, rng, n_coords=6)
            assert comp_err <= 1e-5
        elapsed = time.monotonic() - start
        ok = worst_op <= 1e-5 and comp_err <= 1e-5 and elapsed < 300
        acceptance(ok, "gradient certification (every op + composite loss, fd)",
                   f"worst op {worst_name} {worst_op:.1e}, composite {comp_err:.1e} "
                   f"<= 1e-5, {elapsed:.0f}s < 300s")


# ----------------------------------------------------------------------
# 5. diffusion schedule identities and sampling statistics


class TestDiffusionIdentities:
    def test_identities_all_presets(self, acceptance):
        worst_id, mc_worst = 0.0, 0.0
        rng = np.random.default_rng(500)
        for name in sorted(PRESETS):
            s = preset(name)
            abar_prev = np.concatenate([[1.0], s.alpha_bar[:-1]])
            lhs = 1.0 - s.alpha_bar
            rhs = s.alpha * (1.0 - abar_prev) + s.beta
            worst_id = max(worst_id, float(np.abs(lhs - rhs).max()))
            assert np.abs(lhs - rhs).max() <= 1e-12, name
            assert s.beta_tilde[0] == 0.0, name

            # recorded-noise inversion: substituting the effective noise
            # for the prediction walks the chain exactly back to x0
            x0 = rng.standard_normal((2, 4))
            eps = rng.standard_normal((2, 4))
            x = q_sample(Tensor(x0, dtype=np.float64), s.steps, eps, s).data
            for t in range(s.steps, 0, -1):
                abar = s.alpha_bar[t - 1]
                eff = (x - np.sqrt(abar) * x0) / np.sqrt(1.0 - abar)
                x = posterior_step(x, eff, t, s, None)
            inv_err = float(np.abs(x - x0).max())
            assert inv_err <= 1e-6, (name, inv_err)

            # Monte Carlo check of the closed-form marginal variance
            for t in (1, s.steps // 2, s.steps):
                n = 200_000
                eps_mc = rng.standard_normal(n)
                xt = q_sample(np.full(n, 0.7), t, eps_mc, s).data
                var = float(np.var(xt))
                want = float(1.0 - s.alpha_bar[t - 1])
                rel = abs(var - want) / want
                mc_worst = max(mc_worst, rel)
                assert rel < 0.02, (name, t, var, want)
        acceptance(True, "diffusion identities (all presets)",
                   f"schedule identity max err {worst_id:.1e} <= 1e-12, "
                   f"btilde_1 = 0, inversion <= 1e-6, mc variance off by "
                   f"{100 * mc_worst:.2f}% < 2%")


# ----------------------------------------------------------------------
# 9. bit-exact determinism and checkpoint resume (cheap, so it runs
#    before the big trained fixtures below)


class TestDeterminism:
    def _tiny(self):
        mcfg = ModelConfig(vocab=6, width=8, heads=2, kernel=3,
                           upsample_kernel=4, max_len=8, layers=2)
        tcfg = TrainConfig(k1=8, k2=4, k3=3, lr=3e-4, warmup=2, batch_tokens=64,
                           seed=5, log_interval=1, eval_interval=4)
        pairs = generate_corpus(40, 6, 6, "copy", seed=7)
        return mcfg, tcfg, pairs

    def test_repeat_and_resume_bit_exact(self, acceptance, tmp_path):
        mcfg, tcfg, pairs = self._tiny()
        blobs = []
        for sub in ("r1", "r2"):
            train(mcfg, tcfg, pairs, tmp_path / sub, stages=(1, 2, 3))
            blobs.append((tmp_path / sub / "metrics.jsonl").read_bytes())
        repeat_ok = blobs[0] == blobs[1]

        out_u = tmp_path / "uninterrupted"
        train(mcfg, tcfg, pairs, out_u, stages=(1,))
        out_i = tmp_path / "interrupted"
        hub = RngHub(tcfg.seed)
        model = build_model(mcfg, hub)
        fp = config_fingerprint(mcfg, tcfg)
        run_stage(1, model, pairs, tcfg, hub, MetricsSink(out_i), steps=4,
                  checkpoint_dir=out_i / "checkpoint", fingerprint=fp)
        train(mcfg, tcfg, pairs, out_i, stages=(1,), resume=out_i / "checkpoint")
        resume_ok = ((out_u / "metrics.jsonl").read_bytes()
                     == (out_i / "metrics.jsonl").read_bytes()
                     and (out_u / "final" / "weights.dplx").read_bytes()
                     == (out_i / "final" / "weights.dplx").read_bytes())

        acceptance(repeat_ok and resume_ok, "determinism (rerun + resume)",
                   "metrics.jsonl bit-identical across same-seed runs; "
                   "interrupted+resumed run matches uninterrupted bytes")


# ----------------------------------------------------------------------
# 6. the staged run clears its recorded bars (slow: real training)


class TestStagedTraining:
    def test_stage_bars(self, staged_run, acceptance):
        acc1, acc3 = staged_run["acc1"], staged_run["acc3"]
        a1f, a1r = acc1["fwd"].token_accuracy, acc1["rev"].token_accuracy
        ddm = staged_run["ddm_losses"]
        start, end = ddm[0], float(np.mean(ddm[-100:]))
        drop = max(a1f - acc3["fwd"].token_accuracy,
                   a1r - acc3["rev"].token_accuracy)
        ok = (a1f >= 0.90 and a1r >= 0.90
              and end <= 0.5 * start and drop <= 0.01)
        acceptance(ok, "staged training (acc, ddm halving, finetune hold)",
                   f"stage1 acc fwd {a1f:.4f} rev {a1r:.4f} >= 0.90, "
                   f"ddm loss {start:.4f} -> {end:.4f} (need <= {0.5 * start:.4f}), "
                   f"stage3 worst drop {drop:+.4f} <= 0.01, "
                   f"wall {staged_run['total_wall']:.0f}s")


# ----------------------------------------------------------------------
# 7. widening the beam never hurts corpus BLEU


class TestBeamOrdering:
    def test_beam10_at_least_greedy(self, staged_run, acceptance):
        model, dev = staged_run["model"], staged_run["dev"]
        notes, ok = [], True
        for d in ("fwd", "rev"):
            greedy = evaluate_translation(model, dev, d, beam_size=0)
            beam = evaluate_translation(model, dev, d, beam_size=10)
            ok = ok and beam.bleu >= greedy.bleu
            notes.append(f"{d} beam10 {beam.bleu:.2f} vs greedy {greedy.bleu:.2f}")
        acceptance(ok, "beam-10 bleu >= greedy bleu", "; ".join(notes))


# ----------------------------------------------------------------------
# 8. duplex round-trip: dense cycle error is architectural, token-level
#    cycle quality is a property of the trained copy model


class TestDuplexRoundtrip:
    def test_representation_cycle_untrained(self, acceptance):
        fresh = build_model(ModelConfig(vocab=9, width=32, heads=4, kernel=5,
                                        upsample_kernel=4, max_len=12, layers=4),
                            RngHub(123))
        rng = np.random.default_rng(5)
        srcs = [[int(v) for v in rng.integers(0, 9, size=rng.integers(3, 13))]
                for _ in range(16)]
        err = max(representation_roundtrip_error(fresh, srcs, d)
                  for d in ("fwd", "rev"))
        acceptance(err <= 1e-4, "representation cycle error (untrained, single)",
                   f"max err {err:.2e} <= 1e-4")

    def test_token_roundtrip_trained_copy(self, copy_run, acceptance):
        model, dev = copy_run["model"], copy_run["dev"]
        rt = roundtrip_eval(model, [p.src for p in dev], "xyx")
        acceptance(rt["exact_match"] >= 0.95, "token round-trip on trained copy task",
                   f"x->y->x exact match {rt['exact_match']:.3f} >= 0.95 "
                   f"({rt['count']} held-out sources)")
