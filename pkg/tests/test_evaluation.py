import json

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from agerestore import synthface as sf
from agerestore.evaluation import (HeatmapUnavailableError, MissingOutputsError, Oracles, attention_heatmap,
                                   compute_metrics, cosine, dumps_report, evaluate_run, output_name,
                                   render_table, ssim)
from agerestore.oracles import AgeOracle, IdentityOracle


@pytest.fixture(scope="module")
def face():
    rng = np.random.default_rng(0)
    return sf.render_face(sf.sample_spec(rng, sf.identity_vector(0, 2), 50))[0]


@pytest.fixture(scope="module")
def oracles():
    torch.manual_seed(0)
    age, ident = AgeOracle(), IdentityOracle()
    age.trained.fill_(True)
    ident.trained.fill_(True)
    return Oracles(age.eval(), ident.eval())


def test_ssim_identity_and_symmetry(face):
    noisy = np.clip(face + np.random.default_rng(0).normal(0, 10, face.shape), 0, 255)
    assert ssim(face, face) == pytest.approx(1.0, abs=1e-12)
    assert ssim(face, noisy) == pytest.approx(ssim(noisy, face), abs=1e-12)
    assert ssim(face, noisy) < 1


def test_ssim_constant_gray_baseline(face):
    assert ssim(np.full_like(face, 128), face) < 0.5


def test_ssim_against_independent_loop(face):
    other = np.roll(face, 1, axis=1).astype(np.float64)
    x = face.astype(np.float64)
    r = np.arange(-5, 6)
    w = np.exp(-0.5 * (r[:, None] ** 2 + r[None] ** 2) / 1.5**2)
    w /= w.sum()
    vals = []
    for i in range(5, 27):
        for j in range(5, 27):
            a, b = x[i - 5:i + 6, j - 5:j + 6], other[i - 5:i + 6, j - 5:j + 6]
            ma, mb = (w * a).sum(), (w * b).sum()
            va, vb = (w * a * a).sum() - ma**2, (w * b * b).sum() - mb**2
            cab = (w * a * b).sum() - ma * mb
            c1, c2 = (0.01 * 255) ** 2, (0.03 * 255) ** 2
            vals.append((2 * ma * mb + c1) * (2 * cab + c2) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    assert ssim(x, other) == pytest.approx(np.mean(vals), abs=1e-10)


@given(st.floats(0.5, 20), st.floats(0.5, 20))
def test_psnr_monotone_in_noise(s1, s2):
    from agerestore.degrade import psnr

    x = np.full((8, 8), 100.0)
    a, b = psnr(x + s1, x), psnr(x + s2, x)
    assert (a - b) * (s2 - s1) >= -1e-9


def test_compute_metrics_identity_case(face, oracles):
    m = compute_metrics(face, face, [face], 50.0, oracles)
    assert m["psnr"] == 100.0 and m["ssim"] == pytest.approx(1.0)
    assert m["ids"] == pytest.approx(1.0, abs=1e-6)
    from agerestore.oracles import age_oracle

    assert m["age_pred"] == pytest.approx(age_oracle(face, oracles.age).item())


def test_heatmap_uniform_and_unavailable():
    trace = {"heatmaps": [torch.full((1, 256), 0.3) for _ in range(4)]}
    raw = attention_heatmap(trace, normalize=False)
    assert raw.shape == (16, 16) and np.allclose(raw, 1 / 256)
    assert np.allclose(attention_heatmap(trace), 1.0)
    with pytest.raises(HeatmapUnavailableError):
        attention_heatmap({})
    assert cosine(raw, raw) == pytest.approx(1.0)


@pytest.fixture
def run(tmp_path, oracles):
    m = sf.build_dataset(3, 1, "test_cross_age", gap_buckets=True, out_dir=str(tmp_path / "data"))
    out = tmp_path / "out"
    out.mkdir()
    for i, r in enumerate(m.records):
        sf.save_png(str(out / output_name(i, r)), sf.load_png(m.path(r.gt_path)))
    return m, out


def test_evaluate_run_report(run, oracles, tmp_path):
    m, out = run
    report = evaluate_run(m, str(out), oracles, config={"a": 1}, out_path=str(tmp_path / "r.json"))
    assert report["aggregate"]["count"] == len(m.records)
    assert report["aggregate"]["lpips"] is None and report["aggregate"]["AGE"] >= 0
    assert list(report["buckets"]) == list(sf.GAP_BUCKETS)
    assert json.loads(open(tmp_path / "r.json").read()) == report
    again = evaluate_run(m, str(out), oracles, config={"a": 1})
    assert dumps_report(again) == open(tmp_path / "r.json").read()
    assert "psnr" in render_table(report["buckets"])


def test_evaluate_run_errors(run, oracles):
    m, out = run
    victims = sorted(out.iterdir())[:2]
    for v in victims:
        v.unlink()
    with pytest.raises(MissingOutputsError) as err:
        evaluate_run(m, str(out), oracles)
    assert set(err.value.missing) == {v.name for v in victims}
    with pytest.raises(ValueError):
        evaluate_run(sf.RunManifest("test_cross_age"), str(out), oracles)


def test_untrained_oracle_refused(face):
    from agerestore.oracles import NotReadyError, age_oracle

    with pytest.raises(NotReadyError):
        age_oracle(face, AgeOracle())
