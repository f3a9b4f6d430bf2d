"""Evaluation harness tests: hand-computed transfer cells and averages,
gradient-component sampling oracles, and quality metrics checked against the
independent reference implementations in oracles.py."""

import csv
import math

import numpy as np
import pytest
import torch
import torch.nn as nn

from fpba.attacks import AttackResult
from fpba.errors import InvalidInputError, InvalidParameterError
from fpba.evaluation import (
    GradientDiagnostic,
    MatrixCell,
    QualityReport,
    TransferMatrix,
    attack_success_rate,
    gradient_diagnostic,
    image_quality,
    per_family_accuracy,
    ssim_score,
    transfer_eval,
)

from oracles import reference_psnr, reference_ssim_single


class MeanThreshold(nn.Module):
    """Predicts fake (label 1) when the image mean exceeds the threshold."""

    def __init__(self, threshold):
        super().__init__()
        self.threshold = threshold

    def forward(self, x):
        return (x.mean(dim=(1, 2, 3)) - self.threshold) * 100.0


def _result(adv, attack="stub"):
    n = adv.shape[0]
    return AttackResult(
        adversarial=adv,
        success=torch.zeros(n, dtype=torch.bool),
        linf=torch.zeros(n),
        iterations_used=1,
        attack=attack,
    )


def _const_batch(values):
    return torch.stack([torch.full((3, 8, 8), float(v)) for v in values])


@pytest.fixture()
def scenario():
    x = _const_batch([0.10, 0.20, 0.30, 0.60, 0.70, 0.80])
    y = torch.tensor([0, 0, 0, 1, 1, 1])
    return x, y


class TestAttackSuccessRate:
    def test_clean_inputs_give_zero(self, scenario):
        x, y = scenario
        victim = MeanThreshold(0.45)
        assert attack_success_rate(victim, _result(x), y) == 0.0

    def test_all_flipped_gives_hundred(self, scenario):
        x, y = scenario
        victim = MeanThreshold(0.45)
        assert attack_success_rate(victim, _result(1.0 - x), y) == 100.0

    def test_partial(self, scenario):
        x, y = scenario
        victim = MeanThreshold(0.45)
        adv = x.clone()
        adv[0] = 0.9  # flip one real to fake
        assert attack_success_rate(victim, _result(adv), y) == pytest.approx(100.0 / 6)

    def test_empty_batch_rejected(self):
        victim = MeanThreshold(0.45)
        with pytest.raises(InvalidInputError):
            attack_success_rate(victim, _result(torch.zeros(0, 3, 8, 8)), torch.zeros(0, dtype=torch.long))


class TestTransferEval:
    def _run(self, scenario, min_samples=3):
        x, y = scenario

        def flip(name, model, xs, ys):
            return _result(1.0 - xs, "flip")

        def noop(name, model, xs, ys):
            return _result(xs.clone(), "noop")

        surrogates = {"s45": MeanThreshold(0.45), "s65": MeanThreshold(0.65)}
        victims = {
            "s45": surrogates["s45"],
            "v25": MeanThreshold(0.25),
            "v65": surrogates["s65"],
        }
        attacks = {"flip": flip, "noop": noop}
        return transfer_eval(surrogates, victims, attacks, x, y, min_samples=min_samples)

    def test_hand_computed_cells(self, scenario):
        m = self._run(scenario)
        # Surrogate s45 classifies everything correctly, so it crafts on all 6.
        # Victim s45 also gets all 6 clean inputs right; flipping works on all.
        assert m.cell("s45", "flip", "s45") == MatrixCell(100.0, 6, False)
        # Victim v25 misreads the clean 0.30 image, leaving 5 counted; the
        # flipped fakes at 0.40 and 0.30 still read as fake, so 3 of 5 flip.
        assert m.cell("s45", "flip", "v25").asr == pytest.approx(60.0)
        assert m.cell("s45", "flip", "v25").n == 5
        # Victim v65 misreads the clean 0.60 fake; every counted image flips.
        assert m.cell("s45", "flip", "v65") == MatrixCell(100.0, 5, False)
        # The no-op attack can never flip a correctly classified input.
        for v in ("s45", "v25", "v65"):
            assert m.cell("s45", "noop", v).asr == 0.0

    def test_craft_subset_uses_surrogate_predictions(self, scenario):
        m = self._run(scenario)
        # s65 gets the 0.60 fake wrong, so it crafts on 5 images only; the
        # white-box victim column for s45 then counts those 5.
        assert m.cell("s65", "flip", "s45").n == 5
        assert m.cell("s65", "flip", "s45").asr == pytest.approx(100.0)

    def test_row_average_excludes_white_box(self, scenario):
        m = self._run(scenario)
        # Average for (s45, flip) covers v25 and v65 only: (60 + 100) / 2.
        assert m.row_average("s45", "flip") == pytest.approx(80.0)
        assert m.row_average("s45", "noop") == pytest.approx(0.0)
        # s65 appears among the victims under the name v65, not s65, so its
        # average spans all three columns.
        assert m.row_average("s65", "flip") == pytest.approx(
            (m.cell("s65", "flip", "s45").asr
             + m.cell("s65", "flip", "v25").asr
             + m.cell("s65", "flip", "v65").asr) / 3
        )

    def test_min_samples_flagging(self, scenario):
        m = self._run(scenario, min_samples=6)
        assert not m.cell("s45", "flip", "s45").flagged  # n = 6
        assert m.cell("s45", "flip", "v25").flagged  # n = 5

    def test_empty_craft_subset_short_circuits(self, scenario):
        x, y = scenario

        class AlwaysWrong(nn.Module):
            def forward(self, x):
                return (0.45 - x.mean(dim=(1, 2, 3))) * 100.0  # inverted

        def exploding(name, model, xs, ys):
            raise AssertionError("attack must not run on an empty craft subset")

        m = transfer_eval(
            {"bad": AlwaysWrong()},
            {"v": MeanThreshold(0.45)},
            {"boom": exploding},
            x,
            y,
        )
        assert m.cell("bad", "boom", "v") == MatrixCell(0.0, 0, True)

    def test_single_surrogate_equals_victim_average_is_nan(self, scenario):
        x, y = scenario
        det = MeanThreshold(0.45)

        def noop(name, model, xs, ys):
            return _result(xs.clone())

        m = transfer_eval({"only": det}, {"only": det}, {"noop": noop}, x, y, min_samples=3)
        assert m.cell("only", "noop", "only").n == 6
        assert math.isnan(m.row_average("only", "noop"))

    def test_csv_roundtrip(self, scenario, tmp_path):
        m = self._run(scenario)
        path = tmp_path / "matrix.csv"
        m.save_csv(path)
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 2 * 2 * 3
        back = {
            (r["surrogate"], r["attack"], r["victim"]): r for r in rows
        }
        cell = back[("s45", "flip", "v25")]
        assert float(cell["asr_percent"]) == m.cell("s45", "flip", "v25").asr
        assert int(cell["n_evaluated"]) == 5
        assert cell["white_box"] == "False"
        assert float(cell["row_average"]) == m.row_average("s45", "flip")
        assert back[("s45", "flip", "s45")]["white_box"] == "True"

    def test_as_dict_matches_cells(self, scenario):
        m = self._run(scenario)
        d = m.as_dict()
        assert d["victims"] == ["s45", "v25", "v65"]
        row = next(r for r in d["rows"] if r["surrogate"] == "s45" and r["attack"] == "flip")
        assert row["cells"]["v25"]["asr"] == pytest.approx(60.0)
        assert row["average"] == pytest.approx(80.0)

    def test_rejects_empty_mappings(self, scenario):
        x, y = scenario
        with pytest.raises(InvalidInputError):
            transfer_eval({}, {"v": MeanThreshold(0.5)}, {"a": lambda *a: None}, x, y)
        with pytest.raises(InvalidInputError):
            transfer_eval({"s": MeanThreshold(0.5)}, {}, {"a": lambda *a: None}, x, y)
        with pytest.raises(InvalidInputError):
            transfer_eval({"s": MeanThreshold(0.5)}, {"v": MeanThreshold(0.5)}, {}, x, y)

    def test_rejects_misshapen_attack_output(self, scenario):
        x, y = scenario

        def wrong_shape(name, model, xs, ys):
            return _result(xs[:1])

        with pytest.raises(InvalidInputError):
            transfer_eval(
                {"s": MeanThreshold(0.45)}, {"v": MeanThreshold(0.45)},
                {"bad": wrong_shape}, x, y,
            )


class _FirstChannelSum(nn.Module):
    """Logit depends only on channel 0, so other channels have zero gradient."""

    def forward(self, x):
        return x[:, 0].sum(dim=(1, 2))


class TestGradientDiagnostic:
    def test_component_count_exact(self):
        g = torch.Generator().manual_seed(0)
        x = torch.rand(7, 3, 8, 8, generator=g)
        y = (torch.arange(7) % 2).long()
        diag = gradient_diagnostic(_FirstChannelSum(), x, y, coords_per_image=5)
        assert diag.components.shape == (35,)
        assert diag.images == 7 and diag.coords_per_image == 5

    def test_constant_model_fraction_one(self):
        class Flat(nn.Module):
            def forward(self, x):
                return x.sum(dim=(1, 2, 3)) * 0.0

        x = torch.rand(4, 3, 8, 8, generator=torch.Generator().manual_seed(1))
        y = torch.tensor([0, 1, 0, 1])
        diag = gradient_diagnostic(Flat(), x, y, coords_per_image=10)
        assert torch.equal(diag.components, torch.zeros(40))
        assert diag.near_zero_fraction == 1.0

    def test_dead_channel_fraction_exact(self):
        # Channel 0 carries gradient everywhere; channels 1 and 2 are exactly
        # zero. Sampling every coordinate makes the near-zero fraction 2/3.
        x = torch.rand(5, 3, 2, 2, generator=torch.Generator().manual_seed(2))
        y = torch.ones(5, dtype=torch.long)
        diag = gradient_diagnostic(_FirstChannelSum(), x, y, coords_per_image=12)
        assert diag.components.shape == (60,)
        assert diag.near_zero_fraction == pytest.approx(2.0 / 3.0)

    def test_sampling_replay_matches_manual(self):
        from fpba.detectors import input_gradient

        x = torch.rand(3, 3, 4, 4, generator=torch.Generator().manual_seed(3))
        y = torch.tensor([0, 1, 0])
        model = _FirstChannelSum()
        diag = gradient_diagnostic(model, x, y, coords_per_image=7, seed=11)
        grads = input_gradient(model, x, y).flatten(1)
        rng = np.random.default_rng(11)
        want = []
        for i in range(3):
            cols = rng.choice(48, size=7, replace=False)
            want.append(grads[i, torch.from_numpy(cols)])
        assert torch.equal(diag.components, torch.cat(want))

    def test_seed_determinism(self):
        x = torch.rand(4, 3, 8, 8, generator=torch.Generator().manual_seed(4))
        y = torch.tensor([0, 1, 0, 1])
        model = _FirstChannelSum()
        a = gradient_diagnostic(model, x, y, coords_per_image=20, seed=5)
        b = gradient_diagnostic(model, x, y, coords_per_image=20, seed=5)
        c = gradient_diagnostic(model, x, y, coords_per_image=20, seed=6)
        assert torch.equal(a.components, b.components)
        assert not torch.equal(a.components, c.components)

    def test_validation(self):
        x = torch.rand(2, 3, 4, 4)
        y = torch.tensor([0, 1])
        with pytest.raises(InvalidParameterError):
            gradient_diagnostic(_FirstChannelSum(), x, y, coords_per_image=49)
        with pytest.raises(InvalidParameterError):
            gradient_diagnostic(_FirstChannelSum(), x, y, coords_per_image=0)
        with pytest.raises(InvalidParameterError):
            gradient_diagnostic(_FirstChannelSum(), x, y, threshold=0.0)
        with pytest.raises(InvalidInputError):
            gradient_diagnostic(_FirstChannelSum(), torch.zeros(0, 3, 4, 4), torch.zeros(0, dtype=torch.long))

    def test_summary_and_npz(self, tmp_path):
        x = torch.rand(3, 3, 8, 8, generator=torch.Generator().manual_seed(6))
        y = torch.tensor([0, 1, 0])
        diag = gradient_diagnostic(_FirstChannelSum(), x, y, coords_per_image=4)
        s = diag.summary()
        assert s["n_components"] == 12
        assert 0.0 <= s["near_zero_fraction"] <= 1.0
        assert s["max_abs"] >= s["median_abs"]
        path = tmp_path / "diag.npz"
        diag.save_npz(path)
        with np.load(path) as z:
            assert z["components"].shape == (12,)
            assert float(z["threshold"]) == diag.threshold


class TestImageQuality:
    def test_identical_images(self):
        x = torch.rand(2, 3, 16, 16, generator=torch.Generator().manual_seed(0))
        rep = image_quality(x, x)
        assert rep.mse == 0.0
        assert math.isinf(rep.psnr)
        assert rep.ssim == 1.0

    def test_uniform_delta_closed_form(self):
        x = torch.full((2, 3, 16, 16), 0.4)
        eps = 8 / 255
        rep = image_quality(x, x + eps)
        assert rep.mse == pytest.approx((255 * eps) ** 2, rel=1e-5)
        assert rep.psnr == pytest.approx(-20 * math.log10(eps), rel=1e-5)

    def test_psnr_matches_reference(self):
        g = torch.Generator().manual_seed(1)
        x = torch.rand(2, 3, 16, 16, generator=g)
        adv = (x + torch.randn(x.shape, generator=g) * 0.02).clamp(0, 1)
        rep = image_quality(x, adv)
        want = reference_psnr(x.numpy(), adv.numpy())
        assert rep.psnr == pytest.approx(want, abs=1e-8)

    def test_psnr_mse_identity(self):
        g = torch.Generator().manual_seed(2)
        x = torch.rand(1, 3, 16, 16, generator=g)
        adv = (x + 0.01).clamp(0, 1)
        rep = image_quality(x, adv)
        assert rep.psnr == pytest.approx(10 * math.log10(255.0**2 / rep.mse), abs=1e-12)

    def test_ssim_matches_reference_oracle(self):
        g = torch.Generator().manual_seed(3)
        x = torch.rand(2, 3, 16, 16, generator=g)
        adv = (x + torch.randn(x.shape, generator=g) * 0.05).clamp(0, 1)
        got = ssim_score(x, adv)
        refs = [
            reference_ssim_single(x[b, c].numpy().astype(np.float64), adv[b, c].numpy().astype(np.float64))
            for b in range(2)
            for c in range(3)
        ]
        assert got == pytest.approx(float(np.mean(refs)), abs=1e-10)

    def test_ssim_penalizes_larger_noise(self):
        g = torch.Generator().manual_seed(4)
        x = torch.rand(1, 3, 32, 32, generator=g)
        noise = torch.randn(x.shape, generator=g)
        small = ssim_score(x, (x + 0.01 * noise).clamp(0, 1))
        large = ssim_score(x, (x + 0.10 * noise).clamp(0, 1))
        assert -1.0 <= large < small <= 1.0

    def test_rejects_bad_inputs(self):
        x = torch.rand(1, 3, 16, 16)
        with pytest.raises(InvalidInputError):
            image_quality(x, torch.rand(1, 3, 16, 17))
        with pytest.raises(InvalidInputError):
            image_quality(x, x * 2.0)
        with pytest.raises(InvalidInputError):
            ssim_score(torch.rand(1, 3, 8, 8), torch.rand(1, 3, 8, 8))  # below window
        with pytest.raises(InvalidInputError):
            image_quality(torch.zeros(0, 3, 16, 16), torch.zeros(0, 3, 16, 16))

    def test_report_dict(self):
        rep = QualityReport(mse=4.0, psnr=42.1, ssim=0.97)
        assert rep.as_dict() == {"mse": 4.0, "psnr": 42.1, "ssim": 0.97}


class TestPerFamilyAccuracy:
    def test_breakdown(self):
        x = _const_batch([0.1, 0.2, 0.7, 0.8, 0.3, 0.9])
        y = torch.tensor([0, 0, 1, 1, 0, 1])
        fams = np.array(["real", "real", "grid", "grid", "real", "ring"], dtype=object)
        out = per_family_accuracy(MeanThreshold(0.45), x, y, fams)
        assert out["real"] == {"accuracy": 1.0, "n": 3}
        assert out["grid"] == {"accuracy": 1.0, "n": 2}
        assert out["ring"] == {"accuracy": 1.0, "n": 1}

    def test_misaligned(self):
        with pytest.raises(InvalidInputError):
            per_family_accuracy(
                MeanThreshold(0.5), torch.rand(2, 3, 8, 8), torch.tensor([0, 1]),
                np.array(["a"], dtype=object),
            )
