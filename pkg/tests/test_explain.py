import numpy as np
import pytest

from bsnet import explain, imaging, synthcxr
from bsnet.network import BSNet, ModelConfig, forward_full

SIZE = 32


@pytest.fixture(scope="module")
def model():
    m = BSNet(ModelConfig(input_size=SIZE, seed=2))
    rng = np.random.default_rng(0)
    # untrained heads are nearly flat; perturb so occlusion visibly moves the output
    for name, p in m.named_parameters():
        if name.startswith("head.") or name.startswith("decoder.out"):
            p.data = p.data + rng.normal(0, 0.3, p.data.shape).astype(np.float32)
    return m


@pytest.fixture(scope="module")
def image():
    return imaging.normalize_cxr(synthcxr.make_samples(1, 5, SIZE)[0].image)


def test_matches_brute_force(model, image):
    labels = imaging.extract_superpixels(image, 8)
    expl = explain.explanation_map(model, image, labels=labels, batch=3)
    p0 = forward_full(image, model)[0]
    n = labels.max() + 1
    ref = np.zeros((SIZE, SIZE, 3, 2, 4))
    for i in range(n):
        occluded = image.copy()
        occluded[labels == i] = 0
        pi = forward_full(occluded, model)[0]
        ref += (labels == i)[..., None, None, None] * (pi - p0)
    assert np.abs(expl.emap - ref).max() <= 1e-6
    np.testing.assert_allclose(expl.p0, p0, atol=1e-7)
    assert expl.emap.shape == (SIZE, SIZE, 3, 2, 4)


def test_forward_pass_count(image):
    calls = []

    def predictor(batch):
        calls.append(len(batch))
        return np.full((len(batch), 3, 2, 4), 0.25)

    labels = imaging.extract_superpixels(image, 10)
    explain.explanation_map(predictor, image, labels=labels, batch=4)
    assert sum(calls) == labels.max() + 2


def test_single_superpixel_is_uniform(model, image):
    expl = explain.explanation_map(model, image, n_superpixels=1)
    assert expl.labels.max() == 0
    p_black = forward_full(np.zeros_like(image), model)[0]
    np.testing.assert_allclose(expl.emap, np.broadcast_to(p_black - expl.p0, expl.emap.shape), atol=1e-6)


def test_constant_model_gives_zero_map(image):
    m = BSNet(ModelConfig(input_size=SIZE))
    for p in m.head.classify.parameters():
        p.data[...] = 0
    expl = explain.explanation_map(m, image, n_superpixels=6)
    assert np.abs(expl.emap).max() <= 1e-7
    rgb = explain.render_explanation(expl, expl.prediction, None)
    assert np.all(rgb == 255)


def test_piecewise_constant_on_superpixels(model, image):
    expl = explain.explanation_map(model, image, n_superpixels=8)
    for i in range(expl.labels.max() + 1):
        vals = expl.emap[expl.labels == i]
        assert np.all(vals == vals[0])


def region_mean_predictor(batch):
    """Region A's class-2 probability rises with the mean of the top-left quadrant."""
    out = np.full((len(batch), 3, 2, 4), 0.25)
    for b, img in enumerate(batch):
        v = img[:SIZE // 2, :SIZE // 2].mean()
        out[b, 0, 0] = [0.1, 0.1, 0.5 + 0.3 * v, 0.3 - 0.3 * v]
    return out


def test_single_supportive_superpixel(tmp_path):
    img = np.zeros((SIZE, SIZE), np.float32)
    labels = np.zeros((SIZE, SIZE), np.int64)
    labels[2:8, 2:8] = 1
    labels[:, SIZE // 2:] = 2
    img[2:8, 2:8] = 1.0
    expl = explain.explanation_map(region_mean_predictor, img, labels=labels)
    pred = expl.prediction
    assert pred[0, 0] == 2
    r = explain.supportiveness(expl, pred)
    assert np.all(r[labels == 1] > 0)
    assert np.all(r[labels != 1] == 0)
    rgb = explain.render_explanation(expl, pred, tmp_path / "e.png")
    np.testing.assert_array_equal(rgb[4, 4], explain.CLASS_COLORS[2].astype(np.uint8))
    assert np.all(rgb[labels != 1] == 255)
    back = imaging.read_png(tmp_path / "e.png")
    assert back.dtype == np.uint8 and back.shape == (SIZE, SIZE, 3)
    np.testing.assert_array_equal(back, rgb)
    rs = explain.region_supportiveness(expl, pred)
    assert rs[0, 0] > 0 and rs[1:].max() == 0


def test_region_index_map():
    rows, cols = explain.region_index_map(10, 4)
    # centres 2, 5, 8; pixels 3.5 and 6.5 tie and go to the upper band
    assert list(rows[:, 0]) == [0, 0, 0, 0, 1, 1, 1, 2, 2, 2]
    assert list(cols[0]) == [0, 0, 1, 1]


def test_default_superpixels():
    assert explain.default_superpixels(128) == 200
    assert explain.default_superpixels(64) == 50


def test_deltas_csv(tmp_path, model, image):
    expl = explain.explanation_map(model, image, n_superpixels=4)
    path = tmp_path / "d.csv"
    explain.write_deltas_csv(path, expl)
    lines = path.read_text().splitlines()
    assert lines[0] == "superpixel_id,region,class,delta"
    n = expl.labels.max() + 1
    assert len(lines) == 1 + n * 24
    sid, reg, cls, val = lines[1 + 4 * 3 + 2].split(",")
    # region index 3 is D: row 0, column 1
    assert (sid, reg, cls) == ("0", "D", "2")
    assert float(val) == expl.deltas[0, 0, 1, 2]
