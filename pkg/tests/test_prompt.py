import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from einmemo.canvas import CanvasSpec, compose_canvas, extract_cell
from einmemo.prompt import (
    BorderPrompt,
    CheckpointError,
    PromptGeometry,
    apply,
    init_prompt,
    load_checkpoint,
    materialize,
    param_count,
    save_checkpoint,
)

TABLE = {5: 9780, 10: 18960, 15: 27540, 20: 35520, 25: 42900, 30: 49680}


def _count_by_enumeration(pad, h, w, c=3):
    # oracle: count frame pixels directly
    n = sum(1 for r in range(h) for col in range(w) if r < pad or r >= h - pad or col < pad or col >= w - pad)
    return c * n


@pytest.mark.parametrize("pad,expected", sorted(TABLE.items()))
def test_il_parameter_counts(pad, expected):
    g = PromptGeometry.for_variant("IL", CanvasSpec(), pad)
    assert (g.region_h, g.region_w) == (112, 224)
    assert g.n_params == expected == _count_by_enumeration(pad, 112, 224)
    assert init_prompt(g).values.numel() == expected


def test_single_cell_variants_use_one_quadrant():
    for v in ("I", "L", "Q", "IQ"):
        g = PromptGeometry.for_variant(v, CanvasSpec(), 15)
        assert (g.region_h, g.region_w) == (112, 112)
        assert g.n_params == _count_by_enumeration(15, 112, 112)


@settings(max_examples=50, deadline=None)
@given(h=st.integers(4, 60), w=st.integers(4, 60), pad=st.integers(1, 30))
def test_param_count_property(h, w, pad):
    if 2 * pad >= min(h, w):
        with pytest.raises(ValueError):
            param_count(pad, h, w)
    else:
        assert param_count(pad, h, w) == _count_by_enumeration(pad, h, w)


def test_invalid_geometry():
    with pytest.raises(ValueError):
        PromptGeometry(10, 10, 5)
    with pytest.raises(ValueError):
        PromptGeometry(10, 10, 0)
    with pytest.raises(ValueError):
        PromptGeometry.for_variant("XY")


def test_materialize_interior_zero_and_frame_filled():
    g = PromptGeometry(112, 224, 15)
    p = init_prompt(g, "gaussian", seed=3, std=1.0)
    t = materialize(p)
    assert t.shape == (3, 112, 224)
    assert (t[:, 15:97, 15:209] == 0).all()
    frame = torch.ones(112, 224, dtype=torch.bool)
    frame[15:97, 15:209] = False
    assert (t[:, frame] != 0).all()
    assert sorted(t[:, frame].flatten().tolist()) == sorted(p.values.tolist())


def test_materialize_unique_positions():
    g = PromptGeometry(12, 20, 3)
    p = BorderPrompt(g, torch.arange(1, g.n_params + 1, dtype=torch.float64))
    t = p.materialize()
    for k in range(g.n_params):
        ch, r, c = p.position_of(k)
        assert t[ch, r, c] == k + 1


def test_apply_corner_pixel_and_passthrough():
    spec = CanvasSpec()
    g = PromptGeometry.for_variant("IL", spec, 15)
    p = init_prompt(g)
    with torch.no_grad():
        p.values[0] = 0.7  # channel 0, row 0, col 0 of the top strip
    a, b, q = (torch.full((3, 111, 111), 0.2) for _ in range(3))
    a2, b2, q2 = apply(a, b, q, p, spec)
    assert torch.isclose(a2[0, 0, 0], torch.tensor(0.9))
    assert torch.equal(a2[1:], a[1:]) and torch.equal(a2[0, 1:], a[0, 1:])
    assert torch.equal(b2, b)
    assert q2 is q


def test_apply_matches_canvas_level():
    spec = CanvasSpec()
    for v in ("I", "L", "Q", "IQ", "IL"):
        p = init_prompt(PromptGeometry.for_variant(v, spec, 15), "gaussian", seed=1, std=1, variant=v)
        imgs = [torch.rand(3, 111, 111) for _ in range(3)]
        cells = apply(*imgs, p, spec)
        via_images = compose_canvas(*cells, spec).pixels
        via_canvas = p.apply_canvas(compose_canvas(*imgs, spec).pixels, spec)
        for cell in ("tl", "tr", "bl"):
            assert torch.allclose(extract_cell(via_images, cell, spec), extract_cell(via_canvas, cell, spec))
        # the query cell is never perturbed by image-pair variants
        if v in ("I", "L", "IL"):
            assert torch.equal(cells[2], imgs[2])
        # the label and prediction cells carry no prompt for Q and IQ
        if v in ("Q", "IQ"):
            assert torch.equal(extract_cell(via_canvas, "tr", spec), imgs[1])
        assert torch.equal(extract_cell(via_canvas, "br", spec), torch.zeros(3, 111, 111))


def test_iq_shares_one_frame():
    spec = CanvasSpec()
    p = init_prompt(PromptGeometry.for_variant("IQ", spec, 5), "gaussian", seed=2, std=1, variant="IQ")
    d = p.canvas_delta(spec)
    assert torch.equal(d[:, 0:112, 0:112], d[:, 112:224, 0:112])


def test_apply_shape_mismatch():
    p = init_prompt(PromptGeometry.for_variant("IL"))
    with pytest.raises(ValueError):
        apply(torch.zeros(3, 100, 100), torch.zeros(3, 100, 100), torch.zeros(3, 100, 100), p)


@settings(max_examples=15, deadline=None)
@given(s1=st.integers(0, 99), s2=st.integers(0, 99), delta=st.floats(0.1, 3.0))
def test_apply_linear_in_prompt(s1, s2, delta):
    spec = CanvasSpec(21, 21)
    g = PromptGeometry.for_variant("IL", spec, 4)
    p1 = init_prompt(g, "gaussian", s1, delta=delta, std=1)
    p2 = init_prompt(g, "gaussian", s2, delta=delta, std=1)
    p12 = BorderPrompt(g, p1.values.detach() + p2.values.detach(), delta)
    x = torch.rand(3, 44, 44, dtype=torch.float64)
    lhs = p12.apply_canvas(x, spec) - x
    rhs = (p1.apply_canvas(x, spec) - x) + (p2.apply_canvas(x, spec) - x)
    assert torch.allclose(lhs, rhs, atol=1e-6)


def test_zero_prompt_is_identity():
    spec = CanvasSpec()
    x = torch.rand(3, 224, 224)
    assert torch.equal(init_prompt(PromptGeometry.for_variant("IL")).apply_canvas(x, spec), x)


def test_init_modes():
    g = PromptGeometry(20, 20, 3)
    a = init_prompt(g, "gaussian", seed=5)
    b = init_prompt(g, "gaussian", seed=5)
    assert torch.equal(a.values, b.values) and a.values.abs().max() > 0
    assert (init_prompt(g).values == 0).all()
    with pytest.raises(ValueError):
        init_prompt(g, "uniform")


def test_checkpoint_round_trip(tmp_path):
    g = PromptGeometry.for_variant("IQ", CanvasSpec(), 10)
    p = init_prompt(g, "gaussian", seed=9, delta=0.5, variant="IQ")
    save_checkpoint(p, tmp_path / "p.prompt", {"epoch": 3})
    q, meta = load_checkpoint(tmp_path / "p.prompt")
    assert torch.equal(q.values, p.values)
    assert (q.variant, q.delta, q.geometry, meta) == ("IQ", 0.5, g, {"epoch": 3})
    assert q.digest() == p.digest()


def test_checkpoint_corruption(tmp_path):
    p = init_prompt(PromptGeometry(20, 20, 3), "gaussian")
    path = tmp_path / "p.prompt"
    save_checkpoint(p, path)
    raw = bytearray(path.read_bytes())
    raw[40] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="integrity"):
        load_checkpoint(path)
    path.write_bytes(b"nope")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_wrong_value_count():
    with pytest.raises(ValueError):
        BorderPrompt(PromptGeometry(20, 20, 3), torch.zeros(5))
    with pytest.raises(ValueError):
        BorderPrompt(PromptGeometry(20, 20, 3), variant="bogus")
