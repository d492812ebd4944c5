import math

import numpy as np
import pytest

from vitdp import vit
from vitdp.errors import ConfigError, FormatError, InputError
from vitdp.vit import ViTConfig

from oracles import shape_walk_param_count

SMALL = ViTConfig(image_size=32, channels=3, patch_size=16, embed_dim=16, num_heads=2, depth=2,
                  mlp_ratio=4, num_classes=10)


def images(n, cfg=SMALL, seed=0):
    return np.random.default_rng(seed).random((n, cfg.channels, cfg.image_size, cfg.image_size)).astype(np.float32)


def test_seq_len_examples():
    assert vit.seq_len(vit.VIT_B_16) == 197
    assert vit.seq_len(ViTConfig(image_size=224, patch_size=16)) == 197
    assert vit.seq_len(ViTConfig()) == 5


@pytest.mark.parametrize("kw", [dict(image_size=30), dict(embed_dim=10, num_heads=4), dict(num_classes=1)])
def test_invalid_configs(kw):
    with pytest.raises(ConfigError):
        ViTConfig(**kw)


def test_param_count_matches_shape_walk():
    # frozen from the shape-walk oracle
    assert shape_walk_param_count(32, 3, 16, 16, 2, 4, 10) == 19162
    assert vit.param_count(SMALL) == 19162
    assert vit.param_count(ViTConfig()) == shape_walk_param_count(32, 3, 16, 64, 4, 4, 10)


def test_param_shapes_consistent():
    shapes = vit.param_shapes(SMALL)
    assert shapes["pos_embed"][0] == vit.seq_len(SMALL)
    assert shapes["patch_embed.weight"] == (SMALL.patch_dim, SMALL.embed_dim)
    assert shapes["head.weight"] == (SMALL.embed_dim, SMALL.num_classes)


def test_init_deterministic_and_seed_sensitive():
    a, b, c = vit.init_params(SMALL, 1), vit.init_params(SMALL, 1), vit.init_params(SMALL, 2)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a)
    assert not a["cls_token"].any() and not a["head.bias"].any()


def test_patchify_channel_major():
    x = np.arange(2 * 3 * 4 * 4, dtype=np.float32).reshape(2, 3, 4, 4)
    p = vit.patchify(x, 2)
    assert p.shape == (2, 4, 12)
    # second patch of first image: rows 0-1, cols 2-3, all channels in order
    assert np.array_equal(p[0, 1], np.concatenate([x[0, c, 0:2, 2:4].reshape(-1) for c in range(3)]))


def test_forward_shape_and_batch_independence():
    params = vit.init_params(SMALL, 0)
    x = images(4)
    out = vit.forward(SMALL, params, x)
    assert out.shape == (4, 10)
    assert vit.forward(SMALL, params, x[:1]).shape == (1, 10)
    perm = [2, 0, 3, 1]
    assert np.allclose(vit.forward(SMALL, params, x[perm]), out[perm], atol=1e-6)


def test_identical_images_identical_rows_and_determinism():
    params = vit.init_params(SMALL, 0)
    x = np.repeat(images(1), 2, axis=0)
    out = vit.forward(SMALL, params, x)
    assert np.array_equal(out[0], out[1])
    assert np.array_equal(out, vit.forward(SMALL, params, x))


def test_forward_rejects_wrong_shape():
    with pytest.raises(InputError):
        vit.forward(SMALL, vit.init_params(SMALL, 0), np.zeros((1, 3, 16, 16), np.float32))


def test_random_init_loss_and_accuracy():
    params = vit.init_params(ViTConfig(), 0)
    x = images(200, ViTConfig())
    labels = np.arange(200) % 10
    loss, acc, grads = vit.loss_and_grads(ViTConfig(), params, x, labels)
    assert abs(loss - math.log(10)) < 0.3
    assert acc < 0.25
    assert set(grads) == set(params)
    assert all(grads[k].shape == params[k].shape for k in params)


def test_checkpoint_round_trip(tmp_path):
    params = vit.init_params(SMALL, 4)
    vit.save_params(params, tmp_path / "c.bin")
    back = vit.load_params(tmp_path / "c.bin")
    assert list(back) == list(params)
    assert all(np.array_equal(back[k], params[k]) for k in params)


def test_checkpoint_layout_little_endian():
    blob = vit.params_to_bytes({"w": np.array([[1.0, 2.0]], np.float32)})
    assert blob == (b"\x01\x00\x00\x00" + b"\x01\x00\x00\x00w" + b"\x02\x00\x00\x00"
                    + b"\x01\x00\x00\x00\x02\x00\x00\x00" + np.array([1.0, 2.0], "<f4").tobytes())


@pytest.mark.parametrize("cut", [1, 7, -1])
def test_checkpoint_truncated_or_padded(cut):
    blob = vit.params_to_bytes(vit.init_params(SMALL, 0))
    bad = blob + b"\x00" if cut == -1 else blob[:-cut]
    with pytest.raises(FormatError):
        vit.params_from_bytes(bad)


def test_flatten_round_trip():
    params = vit.init_params(SMALL, 0)
    flat = vit.flatten(params)
    assert flat.size == vit.param_count(SMALL)
    back = vit.unflatten(flat, params)
    assert all(np.array_equal(back[k], params[k]) for k in params)
    with pytest.raises(InputError):
        vit.unflatten(flat[:-1], params)
