"""CTC decoder head: weighted layer-sum, BiLSTM, CTC loss, greedy and prefix
beam decoding, and the character n-gram fusion LM."""

import itertools
import math

import numpy as np
import pytest
import torch

from accentssl.asr_head import (BLANK, VOCAB_SIZE, BiLstmDecoder, CharNGramLM,
                                DecoderHead, beam_decode, ctc_loss,
                                ctc_loss_batch, greedy_decode, ids_to_text,
                                min_frames_for, text_to_ids, weighted_sum)
from accentssl.errors import DataError, InfeasibleTranscriptError


class TestVocab:
    def test_roundtrip(self):
        assert ids_to_text(text_to_ids("the cat's")) == "the cat's"

    def test_blank_is_zero_and_size(self):
        assert BLANK == 0
        assert VOCAB_SIZE == 29

    def test_unknown_char_rejected(self):
        with pytest.raises(DataError):
            text_to_ids("naïve")


class TestWeightedSum:
    def test_equal_weights_mean(self, rng):
        layers = [rng.normal(size=(4, 3)) for _ in range(3)]
        got = weighted_sum(layers, np.zeros(3))
        assert np.allclose(got, np.mean(layers, axis=0), atol=1e-12)

    def test_saturated_softmax_selects_one_layer(self, rng):
        layers = [rng.normal(size=(4, 3)) for _ in range(3)]
        got = weighted_sum(layers, np.array([40.0, 0.0, 0.0]))
        assert np.max(np.abs(got - layers[0])) <= 1e-6

    def test_matches_elementwise_oracle(self, rng):
        layers = [rng.normal(size=(5, 2)) for _ in range(2)]
        raw = rng.normal(size=2)
        got = weighted_sum(layers, raw)
        e = np.exp(raw)
        w = e / e.sum()
        expected = w[0] * layers[0] + w[1] * layers[1]
        assert np.allclose(got, expected, atol=1e-12)

    def test_weights_are_a_probability_vector(self, rng):
        raw = rng.normal(size=5) * 10
        e = np.exp(raw - raw.max())
        w = e / e.sum()
        assert w.min() >= 0 and w.sum() == pytest.approx(1.0, abs=1e-12)

    def test_module_matches_numpy_helper(self, rng):
        head = DecoderHead(3, 4, 2).double()
        with torch.no_grad():
            head.layer_weights.copy_(torch.tensor([0.3, -1.0, 2.0]))
        layers = [torch.tensor(rng.normal(size=(1, 5, 4))) for _ in range(3)]
        got = head.weighted_sum(layers).detach().numpy()[0]
        expected = weighted_sum([la[0].numpy() for la in layers],
                                head.layer_weights.detach().numpy())
        assert np.max(np.abs(got - expected)) <= 1e-12

    def test_layer_exchange_with_weight_exchange_invariance(self, rng):
        layers = [rng.normal(size=(3, 2)) for _ in range(2)]
        raw = np.array([0.7, -0.2])
        a = weighted_sum(layers, raw)
        b = weighted_sum(layers[::-1], raw[::-1])
        assert np.allclose(a, b, atol=1e-12)


def _np_sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _run_direction_oracle(direction, x):
    """Step-by-step numpy LSTM recurrence for one direction, one sequence."""
    wx = direction.wx.weight.detach().numpy()
    bx = direction.wx.bias.detach().numpy()
    wh = direction.wh.weight.detach().numpy()
    H = direction.hidden
    h = np.zeros(H)
    c = np.zeros(H)
    outs = []
    for t in range(x.shape[0]):
        gates = wx @ x[t] + bx + wh @ h
        i = _np_sigmoid(gates[0:H])
        f = _np_sigmoid(gates[H:2 * H])
        g = np.tanh(gates[2 * H:3 * H])
        o = _np_sigmoid(gates[3 * H:4 * H])
        c = f * c + i * g
        h = o * np.tanh(c)
        outs.append(h.copy())
    return np.stack(outs)


class TestBiLstm:
    def test_zero_input_zero_params_zero_logits(self):
        dec = BiLstmDecoder(3, 2, n_layers=1, vocab_size=4).double()
        with torch.no_grad():
            for p in dec.parameters():
                p.zero_()
        out = dec(torch.zeros(1, 5, 3, dtype=torch.float64))
        assert torch.all(out == 0)

    def test_matches_gate_equation_oracle(self, rng):
        dec = BiLstmDecoder(3, 2, n_layers=1, vocab_size=4).double()
        x = rng.normal(size=(3, 3))
        got = dec(torch.tensor(x)[None])[0].detach().numpy()
        fwd = _run_direction_oracle(dec.fwd[0], x)
        bwd = _run_direction_oracle(dec.bwd[0], x[::-1])[::-1]
        feats = np.concatenate([fwd, bwd], axis=1)
        w = dec.out.weight.detach().numpy()
        b = dec.out.bias.detach().numpy()
        assert np.max(np.abs(got - (feats @ w.T + b))) <= 1e-9

    def test_single_step_direction_symmetry(self, rng):
        # T=1: both directions see the same frame, so swapping the direction
        # modules together with the two halves of the output projection
        # leaves the logits unchanged
        dec = BiLstmDecoder(3, 2, n_layers=1, vocab_size=4).double()
        x = torch.tensor(rng.normal(size=(1, 1, 3)))
        base = dec(x)
        swapped = BiLstmDecoder(3, 2, n_layers=1, vocab_size=4).double()
        with torch.no_grad():
            swapped.fwd[0].load_state_dict(dec.bwd[0].state_dict())
            swapped.bwd[0].load_state_dict(dec.fwd[0].state_dict())
            w = dec.out.weight.detach()
            swapped.out.weight.copy_(torch.cat([w[:, 2:], w[:, :2]], dim=1))
            swapped.out.bias.copy_(dec.out.bias)
        assert torch.allclose(swapped(x), base, atol=1e-12)

    def test_padding_does_not_leak_into_valid_frames(self, rng):
        dec = BiLstmDecoder(3, 2, n_layers=2, vocab_size=4).double()
        x = rng.normal(size=(4, 3))
        alone = dec(torch.tensor(x)[None],
                    torch.tensor([4]))[0, :4]
        padded_in = torch.zeros(1, 7, 3, dtype=torch.float64)
        padded_in[0, :4] = torch.tensor(x)
        padded = dec(padded_in, torch.tensor([4]))[0, :4]
        assert torch.allclose(alone, padded, atol=1e-12)


def _brute_force_ctc(log_probs, target):
    """Sum path probabilities over every frame-level path whose collapse
    (merge repeats, drop blanks) equals the target."""
    T, V = log_probs.shape
    total = -math.inf
    for path in itertools.product(range(V), repeat=T):
        collapsed = []
        prev = -1
        for p in path:
            if p != prev and p != BLANK:
                collapsed.append(p)
            prev = p
        if collapsed == list(target):
            lp = sum(log_probs[t, path[t]] for t in range(T))
            total = np.logaddexp(total, lp)
    return -total


class TestCtcLoss:
    def test_min_frames(self):
        assert min_frames_for([1, 2, 3]) == 3
        assert min_frames_for([1, 1]) == 3  # adjacent repeat needs a blank
        assert min_frames_for([]) == 0

    def test_single_frame_single_label(self, rng):
        logits = torch.tensor(rng.normal(size=(1, 4)))
        loss = ctc_loss(logits, [2])
        expected = -torch.log_softmax(logits, dim=-1)[0, 2]
        assert loss.item() == pytest.approx(expected.item(), abs=1e-12)

    def test_t2_single_label_closed_form(self, rng):
        logits = torch.tensor(rng.normal(size=(2, 4)))
        p = torch.softmax(logits, dim=-1).numpy()
        a = 1  # label "a"
        expected = -math.log(p[0, a] * p[1, a] + p[0, BLANK] * p[1, a]
                             + p[0, a] * p[1, BLANK])
        assert ctc_loss(logits, [a]).item() == pytest.approx(expected, abs=1e-12)

    def test_matches_brute_force_t4(self, rng):
        logits = torch.tensor(rng.normal(size=(4, 5)))
        log_probs = torch.log_softmax(logits, dim=-1).numpy()
        got = ctc_loss(logits, [1, 2]).item()
        assert got == pytest.approx(_brute_force_ctc(log_probs, [1, 2]), abs=1e-9)

    def test_matches_brute_force_with_repeats(self, rng):
        logits = torch.tensor(rng.normal(size=(5, 4)))
        log_probs = torch.log_softmax(logits, dim=-1).numpy()
        got = ctc_loss(logits, [2, 2]).item()
        assert got == pytest.approx(_brute_force_ctc(log_probs, [2, 2]), abs=1e-9)

    def test_infeasible_rejected(self, rng):
        logits = torch.tensor(rng.normal(size=(2, 4)))
        with pytest.raises(InfeasibleTranscriptError):
            ctc_loss(logits, [1, 1])  # needs 3 frames

    def test_accepts_text_target(self, rng):
        logits = torch.tensor(rng.normal(size=(6, VOCAB_SIZE)))
        a = ctc_loss(logits, "ab").item()
        b = ctc_loss(logits, text_to_ids("ab")).item()
        assert a == b

    def test_gradients_are_finite(self, rng):
        logits = torch.tensor(rng.normal(size=(5, 4)), requires_grad=True)
        loss = ctc_loss(logits, [1, 2, 3])
        loss.backward()
        assert torch.isfinite(logits.grad).all()

    def test_batch_is_mean_of_singles(self, rng):
        logits = torch.tensor(rng.normal(size=(2, 4, 5)))
        lengths = torch.tensor([4, 3])
        targets = [[1, 2], [3]]
        batch = ctc_loss_batch(logits, targets, lengths).item()
        singles = (ctc_loss(logits[0, :4], [1, 2]).item()
                   + ctc_loss(logits[1, :3], [3]).item()) / 2
        assert batch == pytest.approx(singles, abs=1e-12)


class TestGreedyDecode:
    def _logits_for_path(self, path, V=VOCAB_SIZE):
        out = np.zeros((len(path), V))
        out[np.arange(len(path)), path] = 10.0
        return out

    def test_collapse_rule(self):
        a, b = text_to_ids("a")[0], text_to_ids("b")[0]
        assert greedy_decode(self._logits_for_path([a, a, BLANK, b])) == "ab"

    def test_all_blank_empty(self):
        assert greedy_decode(self._logits_for_path([BLANK] * 4)) == ""

    def test_blank_separates_repeats(self):
        a = text_to_ids("a")[0]
        assert greedy_decode(self._logits_for_path([a, BLANK, a])) == "aa"

    def test_argmax_tie_breaks_low_index(self):
        # identical logits everywhere: argmax is blank (index 0) -> empty
        assert greedy_decode(np.zeros((3, 5))) == ""


def _exhaustive_best_transcript(log_probs, symbols):
    """Highest exact CTC posterior over all label strings of length <= T."""
    T, V = log_probs.shape
    logits = torch.tensor(log_probs)
    best = (-math.inf, "")
    labels = list(range(1, V))
    for length in range(0, T + 1):
        for combo in itertools.product(labels, repeat=length):
            if min_frames_for(list(combo)) > T:
                continue
            score = -_ctc_nll(log_probs, list(combo))
            text = "".join(symbols[v - 1] for v in combo)
            if score > best[0] + 1e-12 or (abs(score - best[0]) <= 1e-12
                                           and text < best[1]):
                best = (score, text)
    return best[1]


def _ctc_nll(log_probs, target):
    return _brute_force_ctc(log_probs, target)


class TestBeamDecode:
    def test_one_hot_path_any_width(self):
        ids = text_to_ids("cab")
        logits = np.zeros((3, VOCAB_SIZE))
        logits[np.arange(3), ids] = 50.0
        for width in (1, 2, 8):
            assert beam_decode(logits, width) == "cab"

    def test_bad_width_rejected(self):
        with pytest.raises(DataError):
            beam_decode(np.zeros((2, 4)), 0)

    def test_matches_exhaustive_posterior_oracle(self, rng):
        symbols = "abc"
        for _ in range(20):
            T = int(rng.integers(2, 5))
            logits = rng.normal(size=(T, 4)) * 2
            log_probs = torch.log_softmax(torch.tensor(logits), dim=-1).numpy()
            got = beam_decode(logits, beam_width=400, symbols=symbols)
            assert got == _exhaustive_best_transcript(log_probs, symbols)

    def test_lm_dominance(self):
        # acoustics mildly prefer 'b' over 'a' and strongly disfavor blank;
        # an LM trained only on "aaaa" with a huge weight must still force an
        # all-'a' output
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(5, VOCAB_SIZE)) * 0.01
        logits[:, BLANK] -= 4.0
        b = text_to_ids("b")[0]
        logits[:, b] += 0.5
        lm = CharNGramLM.fit(["aaaa"], order=2, k=0.5)
        without = beam_decode(logits, beam_width=8)
        assert "b" in without  # sanity: acoustics alone pick 'b'
        out = beam_decode(logits, beam_width=8, lm=lm, lm_weight=5.0)
        assert out and set(out) == {"a"}


class TestCharNGramLM:
    def test_count_arithmetic(self):
        # corpus "aa", order 2, k=1: context 'a' saw {a:1, </s>:1}
        lm = CharNGramLM.fit(["aa"], order=2, k=1.0)
        assert lm.logp("a", ["a"]) == pytest.approx(math.log(2 / 30), abs=1e-12)

    def test_unseen_context_uniform(self):
        lm = CharNGramLM.fit(["aa"], order=3, k=0.5)
        assert lm.logp("q", ["x", "y"]) == pytest.approx(-math.log(29), abs=1e-12)

    def test_distribution_sums_to_one(self):
        lm = CharNGramLM.fit(["the cat", "the dog"], order=3, k=0.1)
        for ctx in [["t", "h"], ["h", "e"], [], ["z", "z"]]:
            total = sum(math.exp(lm.logp(c, list(ctx))) for c in lm.alphabet)
            assert total == pytest.approx(1.0, abs=1e-9)

    def test_score_is_sum_of_steps(self):
        lm = CharNGramLM.fit(["the cat"], order=2, k=0.5)
        text = "the"
        expected = (lm.logp("t", []) + lm.logp("h", ["t"])
                    + lm.logp("e", ["t", "h"]))
        assert lm.score(text) == pytest.approx(expected, abs=1e-12)

    def test_json_roundtrip(self, tmp_path):
        lm = CharNGramLM.fit(["the cat sat"], order=3, k=0.2)
        path = str(tmp_path / "lm.json")
        lm.save(path)
        back = CharNGramLM.load(path)
        assert back.order == lm.order and back.k == lm.k
        for c, ctx in [("t", []), ("h", ["t"]), ("e", ["t", "h"]), ("q", ["q", "q"])]:
            assert back.logp(c, ctx) == lm.logp(c, ctx)

    def test_validation(self):
        with pytest.raises(DataError):
            CharNGramLM(order=0, k=1.0)
        with pytest.raises(DataError):
            CharNGramLM(order=2, k=0.0)
        with pytest.raises(DataError):
            CharNGramLM.fit([], order=2, k=1.0)
