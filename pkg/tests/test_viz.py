import numpy as np
import pytest
import torch
from PIL import Image

from zebra.errors import ConfigError
from zebra.viz import ALPHA, darkness_grid, overlay_array, render_overlay


@pytest.fixture
def image():
    rng = np.random.default_rng(0)
    return rng.random((3, 16, 16))


def test_all_kept_is_identity(image):
    out = overlay_array(image, torch.ones(4, 4, 4, dtype=torch.bool))
    assert np.array_equal(out, np.round(image * 255).astype(np.uint8).transpose(1, 2, 0))


def test_all_pruned_scales_by_one_minus_alpha(image):
    out = overlay_array(image, torch.zeros(4, 4, 4, dtype=torch.bool))
    expected = np.round(image * (1 - ALPHA) * 255).astype(np.uint8).transpose(1, 2, 0)
    assert np.array_equal(out, expected)


def test_checkerboard_pixels():
    img = np.ones((3, 8, 8))
    mask = torch.zeros(2, 2, 2, dtype=torch.bool)
    mask[0, 0, 0] = mask[0, 1, 1] = True  # channel 0 keeps the diagonal
    mask[1, 0, 0] = True  # channel 1 keeps only the top-left block
    grid = darkness_grid(mask)
    assert grid.tolist() == [[0.0, 1.0], [1.0, 0.5]]
    out = overlay_array(img, mask)
    for (y, x), d in {(0, 0): 0.0, (0, 7): 1.0, (7, 0): 1.0, (7, 7): 0.5, (3, 4): 1.0}.items():
        assert out[y, x].tolist() == [round(255 * (1 - ALPHA * d))] * 3


def test_render_writes_pngs_deterministically(tmp_path, image):
    masks = {"features.0.gate": torch.rand(4, 4, 4) > 0.5, "features.2.gate": torch.rand(8, 2, 2) > 0.5}
    paths = render_overlay(image, masks, out_dir=tmp_path / "a")
    again = render_overlay(image, masks, out_dir=tmp_path / "b")
    assert [p.name for p in paths] == ["features_0_gate.png", "features_2_gate.png"]
    for p, q in zip(paths, again):
        assert p.read_bytes() == q.read_bytes()
    with Image.open(paths[1]) as im:
        assert im.size == (16, 16) and im.mode == "RGB"
        assert np.array_equal(np.asarray(im), overlay_array(image, masks["features.2.gate"]))


def test_render_selected_layers(tmp_path, image):
    masks = {"a": torch.ones(1, 2, 2, dtype=torch.bool), "b": torch.ones(1, 2, 2, dtype=torch.bool)}
    assert [p.name for p in render_overlay(image, masks, ["b"], tmp_path)] == ["b.png"]


def test_ungated_layer_rejected(tmp_path, image):
    with pytest.raises(ConfigError, match="classifier"):
        render_overlay(image, {"a": torch.ones(1, 2, 2, dtype=torch.bool)}, ["classifier"], tmp_path)


def test_mask_rank_checked():
    with pytest.raises(ValueError):
        darkness_grid(torch.ones(1, 1, 2, 2, dtype=torch.bool))
