import numpy as np
import pytest

import semstyle


def test_mix_indices_scale_with_depth():
    assert semstyle.scaled_mix_indices(18) == [3, 6, 9, 12]
    assert semstyle.scaled_mix_indices(10) == [2, 3, 5, 7]


def test_fid_of_identical_features_is_zero():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((400, 4))
    assert semstyle.fid(a, a) == pytest.approx(0.0, abs=1e-9)
    b = rng.standard_normal((400, 4)) + 1.0
    assert semstyle.fid(a, b) == pytest.approx(semstyle.fid(b, a), rel=1e-9)
    assert semstyle.fid(a, b) > 3.0


def test_errors_use_the_exception_hierarchy():
    with pytest.raises(semstyle.InvalidInputError):
        semstyle.fid(np.zeros(3), np.zeros((4, 2)))
    assert issubclass(semstyle.InvalidInputError, ValueError)
    assert issubclass(semstyle.NotFoundError, LookupError)
    assert issubclass(semstyle.ConflictError, semstyle.SemstyleError)


def test_pixel_conversion_round_trips():
    pixels = np.random.default_rng(1).integers(0, 256, size=(8, 8, 3), dtype=np.uint8)
    image = semstyle.from_uint8(pixels)
    assert image.shape == (3, 8, 8) and image.dtype == np.float32
    assert image.min() >= -1.0 and image.max() <= 1.0
    np.testing.assert_array_equal(semstyle.to_uint8(image), pixels)


def test_constrained_finetune_needs_pairs(tmp_path):
    (tmp_path / "config.json").write_text('{"finetune": {"lambda_paired": 1.0}}')
    with pytest.raises(semstyle.ConfigError):
        semstyle.finetune(str(tmp_path))
    assert not (tmp_path / "runs").exists()


def test_bootstrap_reports(tiny_workspace):
    root, reports = tiny_workspace
    assert reports["finetune"]["role"] == "constrained_finetuned"
    assert reports["finetune_unconstrained"]["role"] == "unconstrained_finetuned"
    assert (root / "cartoon" / "policy.json").exists()
    again = semstyle.finetune(str(root))
    assert again["generator_hash"] == reports["finetune"]["generator_hash"]


def test_session_stylize_and_mix(tiny_workspace):
    root, _ = tiny_workspace
    session = semstyle.StyleSession(str(root))
    assert session.style_id == "cartoon"
    assert session.layer_count == 8
    image = semstyle.load_image(str(root / "data" / "test" / "00000.png"), session.resolution)
    assert image.shape == (3, 32, 32)

    general = session.stylize(image)
    assert np.isfinite(general).all()
    np.testing.assert_array_equal(session.mix(image, k=session.layer_count), general)
    a = session.mix(image, k=2, seed=4)
    np.testing.assert_array_equal(a, session.mix(image, k=2, seed=4))
    assert not np.array_equal(a, session.mix(image, k=2, seed=5))
    with pytest.raises(semstyle.InvalidInputError):
        session.mix(image, k=session.layer_count + 1)
    with pytest.raises(semstyle.InvalidInputError):
        session.stylize(np.zeros((3, 16, 16), dtype=np.float32))

    out = root / "py.png"
    semstyle.save_png(str(out), general)
    assert out.stat().st_size > 0


def test_session_reference_cache(tiny_workspace):
    root, _ = tiny_workspace
    session = semstyle.StyleSession(str(root))
    ref = semstyle.load_image(str(root / "data" / "cartoon" / "00001.png"), session.resolution)
    first = session.embed_reference(ref)
    second = session.embed_reference(ref)
    assert first["cache_hit"] is False
    assert second == {**first, "cache_hit": True, "inversion_steps": 0}

    portrait = semstyle.load_image(str(root / "data" / "test" / "00001.png"), session.resolution)
    mixed = session.mix_reference(portrait, first["reference_id"], k=3)
    assert mixed.shape == (3, 32, 32)
    with pytest.raises(semstyle.NotFoundError):
        session.mix_reference(portrait, "0" * 64)
