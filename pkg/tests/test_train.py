import numpy as np
import pytest

from zssmnet import mesh, train, volume
from zssmnet.phantom import PhantomParams, generate_dataset
from zssmnet.ssl import RecipeProbs
from zssmnet.volume import CaseRecord, Volume, ZonalMask

TINY = PhantomParams(dims=(8, 16, 16), spacing=(3.0, 1.0, 1.0), gland_radii_mm=(6, 5, 5),
                     lesion_radius_mm=(1.5, 2.5), centre_jitter_mm=0.5, min_lesion_voxels=3,
                     max_lesions=1)
CFG = mesh.MeshConfig(grid=3, base_filters=2, growth=1)
IDENTITY = RecipeProbs(p_nonlinear=0, p_shuffle=0, p_inner=0, p_outer=0)


@pytest.fixture(scope="module")
def cases():
    return generate_dataset(4, TINY, seed=0)[0]


def _net(seed=0):
    return mesh.build(CFG, seed=seed)


def test_deep_supervision_weights():
    w = train.deep_supervision_weights(5)
    by_head = dict(zip(mesh.head_positions(5), w[1:]))
    assert w[0] == 1.0 and len(w) == 7
    for i, lam in ((4, 0.5), (3, 0.25), (2, 0.125)):
        assert by_head[(i, 5)] == lam and by_head[(5, i)] == lam
    assert sorted(set(w), reverse=True) == [1.0, 0.5, 0.25, 0.125]
    assert train.deep_supervision_weights(3) == [1.0, 0.5, 0.5]


def test_early_stopping_rule():
    s = train.EarlyStopping(3)
    assert [s.update(v) for v in (5, 4, 4, 4.5, 4)] == [False, False, False, False, True]


def test_pretrain_stops_after_patience_on_plateau():
    z = np.zeros((8, 16, 16))
    flat = CaseRecord("flat", Volume(np.zeros((3,) + z.shape), TINY.spacing),
                      ZonalMask(np.ones(z.shape, np.uint8), TINY.spacing))
    cfg = train.PretrainConfig(batch_size=2, subvolumes_per_case=2, subvolume_dims=(8, 16, 16),
                               patience=3, max_epochs=50, probs=IDENTITY)
    res = train.pretrain([flat], _net(), cfg)
    assert [h["loss"] for h in res.history] == [0.0] * 4
    assert res.stopped_epoch == 3


def test_pretrain_identity_recipes_reach_small_loss(cases, tmp_path):
    cfg = train.PretrainConfig(batch_size=2, subvolumes_per_case=4, subvolume_dims=(8, 16, 16),
                               max_epochs=10, lr0=0.3, step_size=100, probs=IDENTITY)
    res = train.pretrain(cases, _net(), cfg, log_path=tmp_path / "log.csv")
    img = np.stack([volume.network_input(c, "unit_range")[:3] for c in cases])
    zero_head = float((img ** 2).mean())  # loss of the zero-initialised head
    constant = float(img.var(axis=(0, 2, 3, 4)).mean())  # best per-channel constant
    final = res.history[-1]["loss"]
    assert final < 0.15 * zero_head and final < 0.5 * constant
    val = [h["val_metric"] for h in res.history]
    assert all(b <= a for a, b in zip(val[:5], val[1:5]))
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "epoch,loss,lr,val_metric" and len(lines) == 11


def test_pretrain_divergence_names_step(cases):
    cfg = train.PretrainConfig(batch_size=2, subvolumes_per_case=1, subvolume_dims=(8, 16, 16),
                               max_epochs=20, lr0=1e12, step_size=100)
    with pytest.raises(train.DivergenceError) as err, np.errstate(all="ignore"):
        train.pretrain(cases, _net(), cfg)
    assert err.value.step >= 1


def _ft_cfg(**kw):
    base = dict(epochs=2, patch_dims=(8, 16, 16), batch_size=2, iterations_per_epoch=2, lr0=0.1)
    base.update(kw)
    return train.FinetuneConfig(**base)


def test_finetune_bit_reproducible(cases, tmp_path):
    for tag in ("a", "b"):
        res = train.finetune(cases, _net(1), _ft_cfg(seed=4))
        train.save_model(tmp_path / f"{tag}.zckpt", res.net)
    assert (tmp_path / "a.zckpt").read_bytes() == (tmp_path / "b.zckpt").read_bytes()
    other = train.finetune(cases, _net(1), _ft_cfg(seed=5))
    train.save_model(tmp_path / "c.zckpt", other.net)
    assert (tmp_path / "c.zckpt").read_bytes() != (tmp_path / "a.zckpt").read_bytes()


def test_finetune_transfers_backbone_only(cases, tmp_path):
    src = _net(7)
    src.add_restoration_head(3)
    train.save_model(tmp_path / "pre.zckpt", src)
    dst = _net(8)
    n = train.load_backbone(dst, train.load_model(tmp_path / "pre.zckpt")[0].params.values())
    assert n > 0
    for name, p in dst.params.items():
        same = np.array_equal(p.value, src.params[name].value)
        if ".head." not in name:
            assert same, name
        elif name.endswith(".w"):
            assert not same, name  # heads keep their own initialisation
    res = train.finetune(cases, _net(8), _ft_cfg(epochs=1), init=tmp_path / "pre.zckpt")
    assert res.net.restoration_head is None


def test_finetune_errors(cases):
    with pytest.raises(ValueError, match="empty"):
        train.finetune([], _net(), _ft_cfg())
    with pytest.raises(ValueError, match="divisibility"):
        train.finetune(cases, _net(), _ft_cfg(patch_dims=(8, 15, 16)))
    with pytest.raises(ValueError):
        train.FinetuneConfig(folds=0)


def test_finetune_folds_write_models(cases, tmp_path):
    res = train.finetune_folds(cases, lambda k: _net(k), _ft_cfg(epochs=1, folds=2),
                               out_dir=tmp_path)
    assert [k for k, _ in res] == [0, 1]
    for k in (0, 1):
        net, meta = train.load_model(tmp_path / f"model_fold{k}.zckpt")
        assert meta["fold"] == k
        assert (tmp_path / f"train_fold{k}.csv").exists()
    folds = train.fold_assignment([c.case_id for c in cases], 2)
    assert sorted(folds.values()) == [0, 0, 1, 1]


def test_sample_patch_prefers_lesions():
    y = np.zeros((8, 32, 32), np.float32)
    y[4, 20:22, 20:22] = 1
    x = np.zeros((6,) + y.shape, np.float32)
    r = np.random.default_rng(0)
    hits = [train.sample_patch(x, y, (8, 8, 8), r, 1.0)[1].any() for _ in range(50)]
    assert all(hits)
    px, py = train.sample_patch(x, y, (8, 8, 8), r, 0.0)
    assert px.shape == (6, 8, 8, 8) and py.shape == (8, 8, 8)


# ------------------------------------------------------------ inference

def test_infer_pads_and_crops_back():
    net = _net()
    small = generate_dataset(1, TINY, seed=3)[0][0]
    small = volume.preprocess_case(small, TINY.spacing, margin_mm=None, target_dims=(6, 12, 10))
    out = train.infer([net], small, (8, 16, 16))
    assert out.dims == (6, 12, 10) and out.channels == 1
    assert out.data.min() >= 0 and out.data.max() <= 1


def test_infer_ensemble_laws(cases):
    a, b = _net(1), _net(2)
    case = cases[0]
    single = train.infer([a], case, (8, 8, 8)).data
    np.testing.assert_array_equal(train.infer([a, a], case, (8, 8, 8)).data, single)
    ab = train.infer([a, b], case, (8, 8, 8)).data
    np.testing.assert_array_equal(ab, train.infer([b, a], case, (8, 8, 8)).data)

    def half(x):
        return np.full((x.shape[0],) + x.shape[2:], 0.5)
    mixed = train.infer([a, half], case, (8, 8, 8)).data
    np.testing.assert_allclose(mixed, (single + 0.5) / 2, atol=1e-7)


def test_sliding_window_covers_every_voxel():
    calls = []

    def ones(x):
        calls.append(x.shape)
        return np.ones((x.shape[0],) + x.shape[2:])
    arr = np.zeros((6, 8, 20, 20), np.float32)
    out = train.sliding_window(ones, arr, (8, 8, 8))
    assert out.shape == (8, 20, 20) and (out == 1).all()
    assert len(calls) == 16  # positions 0, 4, 8, 12 per in-plane axis
    assert train._positions(20, 8, 4) == [0, 4, 8, 12]
    assert train._positions(6, 8, 4) == [0]


def test_infer_incompatible_models(cases):
    case = cases[0]
    with pytest.raises(train.IncompatibleModelError):
        train.infer([mesh.build(mesh.MeshConfig(grid=5, base_filters=2, growth=1))], case,
                    (8, 8, 8))
    five = mesh.build(mesh.MeshConfig(grid=3, base_filters=2, growth=1, in_channels=5))
    with pytest.raises(train.IncompatibleModelError, match="channels"):
        train.infer([five], case, (8, 8, 8))
    with pytest.raises(ValueError):
        train.infer([], case, (8, 8, 8))
