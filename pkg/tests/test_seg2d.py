import numpy as np
import pytest
import torch

from cfr.checkpoint import load_checkpoint
from cfr.losses import dice_ce_loss
from cfr.seg2d import (
    FinetuneConfig,
    Seg2DConfig,
    build_seg2d,
    finetune,
    forward_2d,
    load_seg2d,
    parameter_counts,
    save_seg2d,
)

from oracles import max_fd_relative_error

TINY = dict(
    input_size=32, patch_size=4, embed_dim=16, depth=1, num_heads=2,
    num_classes=2, lora_rank=2,
)


def _tiny_model(seed=0):
    return build_seg2d(Seg2DConfig(seed=seed, **TINY))


def _rand_grid(size, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(0, 1, size=(size, size)).astype(np.float32)


class TestBuild:
    def test_token_count_from_patch_arithmetic(self):
        model = build_seg2d(Seg2DConfig(input_size=128, patch_size=16))
        assert model.config.tokens_per_side == 8
        assert model.pos_embed.shape == (1, 64, model.config.embed_dim)

    def test_default_config_token_grid(self):
        model = build_seg2d(Seg2DConfig())
        assert model.config.tokens_per_side == 16

    def test_same_seed_identical_parameters(self):
        a, b = _tiny_model(5), _tiny_model(5)
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            assert torch.equal(pa, pb)

    def test_decoder_emits_one_channel_per_class(self):
        model = build_seg2d(Seg2DConfig(seed=0, **{**TINY, "num_classes": 3}))
        logits = forward_2d(model, _rand_grid(32))
        assert logits.shape == (3, 32, 32)

    def test_invalid_patch_divisibility(self):
        with pytest.raises(ValueError, match="divisible"):
            Seg2DConfig(input_size=100, patch_size=16)

    def test_freeze_partition(self):
        model = _tiny_model()
        for name, p in model.named_parameters():
            expected = name.startswith("decoder.") or "lora_" in name
            assert p.requires_grad == expected, name

    def test_trainable_fraction_below_ten_percent(self):
        total, trainable = parameter_counts(build_seg2d(Seg2DConfig()))
        assert trainable / total < 0.10


class TestForward:
    def test_output_shape(self):
        logits = forward_2d(_tiny_model(), _rand_grid(32))
        assert logits.shape == (2, 32, 32)
        assert torch.isfinite(logits).all()

    def test_deterministic_inference(self):
        model = _tiny_model(3)
        grid = _rand_grid(32, seed=1)
        with torch.no_grad():
            a = forward_2d(model, grid)
            b = forward_2d(model, grid)
        assert torch.equal(a, b)

    def test_softmax_normalizes(self):
        logits = forward_2d(_tiny_model(), _rand_grid(32, seed=2))
        probs = torch.softmax(logits, dim=0)
        assert torch.allclose(probs.sum(dim=0), torch.ones(32, 32), atol=1e-6)

    def test_nonfinite_input_rejected(self):
        grid = _rand_grid(32)
        grid[0, 0] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            forward_2d(_tiny_model(), grid)

    def test_wrong_size_rejected(self):
        with pytest.raises(ValueError, match="expected"):
            forward_2d(_tiny_model(), _rand_grid(64))


def _toy_pair(seed=0):
    rng = np.random.default_rng(seed)
    img = rng.uniform(0, 0.3, size=(32, 32)).astype(np.float32)
    lab = np.zeros((32, 32), dtype=np.uint8)
    img[8:24, 8:24] += 0.6
    lab[8:24, 8:24] = 1
    return img, lab


class TestFinetune:
    def test_loss_decreases_on_toy_grid(self):
        model = _tiny_model(1)
        model, trace = finetune(model, [_toy_pair()], epochs=50)
        assert trace[-1] < trace[0]

    def test_zero_epochs_leaves_model_untouched(self):
        model = _tiny_model(2)
        before = {n: p.detach().clone() for n, p in model.named_parameters()}
        model, trace = finetune(model, [_toy_pair()], epochs=0)
        assert trace == []
        for n, p in model.named_parameters():
            assert torch.equal(p, before[n]), n

    def test_frozen_base_never_moves(self):
        model = _tiny_model(3)
        frozen_before = model.encoder_base_state()
        model, _ = finetune(model, [_toy_pair()], epochs=20)
        for name, saved in model.encoder_base_state().items():
            assert torch.equal(saved, frozen_before[name]), name

    def test_trace_reproducible(self):
        _, t1 = finetune(_tiny_model(4), [_toy_pair()], epochs=10)
        _, t2 = finetune(_tiny_model(4), [_toy_pair()], epochs=10)
        assert t1 == t2

    def test_empty_training_set_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            finetune(_tiny_model(), [], epochs=5)

    def test_grid_fn_changes_data_each_epoch(self):
        seen = []

        def grid_fn(epoch):
            seen.append(epoch)
            return [_toy_pair(seed=epoch)]

        finetune(_tiny_model(5), [], epochs=4, grid_fn=grid_fn)
        assert seen == [0, 1, 2, 3]


class TestGradients:
    def test_analytic_matches_finite_differences(self):
        model = _tiny_model(1).double()
        grid = torch.from_numpy(_rand_grid(32, seed=7)).double()
        gen = torch.Generator().manual_seed(8)
        target = torch.randint(0, 2, (32, 32), generator=gen)
        params = [p for p in model.parameters() if p.requires_grad]

        def loss_fn():
            return dice_ce_loss(forward_2d(model, grid), target)

        err, n = max_fd_relative_error(loss_fn, params, n_probes=25, seed=11)
        assert n >= 20
        assert err < 1e-3


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        model = _tiny_model(9)
        with torch.no_grad():
            for p in model.parameters():
                p.add_(0.01)  # move away from init to make the check meaningful
        path = tmp_path / "seg2d.cfrc"
        save_seg2d(model, path)
        back = load_seg2d(path)
        assert back.config == model.config
        for (na, pa), (nb, pb) in zip(model.named_parameters(), back.named_parameters()):
            assert na == nb
            assert torch.equal(pa, pb)

    def test_checkpoint_bytes_deterministic(self, tmp_path):
        p1, p2 = tmp_path / "a.cfrc", tmp_path / "b.cfrc"
        save_seg2d(_tiny_model(10), p1)
        save_seg2d(_tiny_model(10), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_kind_is_checked(self, tmp_path):
        path = tmp_path / "x.cfrc"
        save_seg2d(_tiny_model(11), path)
        ckpt = load_checkpoint(path)
        assert ckpt.kind == "seg2d"
        from cfr.seg3d import seg3d_from_checkpoint

        with pytest.raises(ValueError, match="seg3d"):
            seg3d_from_checkpoint(ckpt)
