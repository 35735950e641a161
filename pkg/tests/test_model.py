import pytest
import torch

from tide import utils
from tide.datatypes import ModelConfig, Modality, Toggles
from tide.model import (
    JointTrace,
    PretrainedBase,
    TideModel,
    build_model,
    build_share_map,
    forward_joint,
    freeze_for_finetune,
    init_mini_from_image,
    trainable_parameters,
)
from tide.nn import LoraLinear, encode_text, grad_check

utils.setup_logger(None)

SMALL = dict(
    size=4,
    patch=2,
    width=8,
    heads=1,
    ff_mult=2,
    max_tokens=8,
    image_layers=4,
    mini_layers=2,
    share_start=0,
    share_end=3,
    share_stride=2,
    lora_rank_image=2,
    lora_rank_depth=2,
    lora_rank_mask=2,
)
BOTH = Toggles(ils=True, tan=True)
ILS_ONLY = Toggles(ils=True, tan=False)
NEITHER = Toggles(ils=False, tan=False)


def _model(seed: int = 0, **overrides) -> TideModel:
    return build_model(ModelConfig(**{**SMALL, **overrides}), vocab_size=10, seed=seed, max_timestep=10)


def _randomize_heads(model: TideModel, seed: int = 0):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in Modality:
            head = model.branch(m).head
            head.weight.copy_(torch.randn(head.weight.shape, generator=g) * 0.1)


def _inputs(seed: int, batch: int = 2, size: int = 4):
    g = torch.Generator().manual_seed(seed)
    return tuple(torch.randn(batch, 3, size, size, generator=g) for _ in range(3))


def _text(model: TideModel, batch: int = 2):
    return encode_text(torch.tensor([[0, 3, 4, 1]] * batch), model.text)


class TestShareMap:
    def test_desk_geometry(self):
        assert build_share_map(8, 4, 0, 7, 2) == [(0, 0), (2, 1), (4, 2), (6, 3)]

    def test_full_scale_geometry(self):
        pairs = build_share_map(28, 10, 0, 27, 3)
        assert len(pairs) == 10
        assert pairs[0] == (0, 0) and pairs[1] == (3, 1) and pairs[-1] == (27, 9)

    def test_degenerate_range(self):
        assert build_share_map(8, 4, 0, 0, 3) == [(0, 0)]

    def test_errors(self):
        with pytest.raises(ValueError):
            build_share_map(8, 4, 3, 2, 1)
        with pytest.raises(ValueError):
            build_share_map(8, 4, 0, 8, 1)
        with pytest.raises(ValueError):
            build_share_map(8, 4, 0, 7, 0)

    def test_annotation_deeper_than_image(self):
        with pytest.raises(ValueError):
            ModelConfig(**{**SMALL, "mini_layers": 5})


class TestMiniBranch:
    def test_copy_matches_truncated_image_branch(self):
        base = PretrainedBase(ModelConfig(**SMALL), vocab_size=10, seed=0)
        with torch.no_grad():
            base.image.head.weight.normal_()
        z = torch.randn(2, 3, 4, 4)
        text = encode_text(torch.tensor([[0, 3, 1], [0, 4, 1]]), base.text)
        for k in (1, 2, 4):
            mini = init_mini_from_image(base.image, k)
            assert len(mini.blocks) == k
            h = base.image.embed(z)
            temb = base.image.time(5, 2)
            for block in base.image.blocks[:k]:
                h, _ = block(h, text, temb)
            assert torch.equal(mini(z, 5, text), base.image.predict(h))
        full = init_mini_from_image(base.image, 4)
        assert torch.equal(full(z, 3, text), base.image(z, 3, text))

    def test_k_out_of_range(self):
        base = PretrainedBase(ModelConfig(**SMALL), vocab_size=10)
        with pytest.raises(ValueError):
            init_mini_from_image(base.image, 0)
        with pytest.raises(ValueError):
            init_mini_from_image(base.image, 5)


class TestForwardJoint:
    def test_shapes(self):
        model = _model()
        z = _inputs(0)
        for toggles in (BOTH, NEITHER):
            outs = forward_joint(*z, 3, _text(model), model, toggles)
            assert [tuple(o.shape) for o in outs] == [tuple(x.shape) for x in z]

    def test_per_sample_timesteps(self):
        model = _model()
        outs = forward_joint(*_inputs(0), torch.tensor([1, 9]), _text(model), model, BOTH)
        assert outs[0].shape == (2, 3, 4, 4)

    def test_decoupled_image_branch(self):
        model = _model()
        _randomize_heads(model)
        z_i, z_d, z_m = _inputs(1)
        text = _text(model)
        a = forward_joint(z_i, z_d, z_m, 4, text, model, NEITHER)[0]
        b = forward_joint(z_i, torch.randn_like(z_d), torch.randn_like(z_m), 4, text, model, NEITHER)[0]
        assert torch.equal(a, b)

    def test_shared_layouts_are_bit_identical(self):
        model = _model()
        text = _text(model)
        for trial in range(100):
            trace = JointTrace()
            t = trial % 10 + 1
            forward_joint(*_inputs(trial), t, text, model, ILS_ONLY, trace)
            for i, j in model.share_map:
                for m in Modality.annotations():
                    assert torch.equal(trace.consumed[(m, j)].probs, trace.image_layouts[i].probs)

    def test_own_layouts_without_sharing(self):
        model = _model()
        trace = JointTrace()
        forward_joint(*_inputs(2), 5, _text(model), model, NEITHER, trace)
        i, j = model.share_map[0]
        assert not torch.equal(
            trace.consumed[(Modality.depth, j)].probs, trace.image_layouts[i].probs
        )

    def test_copied_layers_match_image_layers(self):
        model = _model(share_end=1, share_stride=1)
        assert model.share_map == [(0, 0), (1, 1)]
        z_i, _, _ = _inputs(3)
        trace = JointTrace()
        forward_joint(z_i, z_i.clone(), z_i.clone(), 6, _text(model), model, ILS_ONLY, trace)
        for j in range(2):
            for m in Modality.annotations():
                assert torch.equal(trace.hidden[(m, j)], trace.hidden[(Modality.image, j)])

    @pytest.mark.parametrize("site", ["after_block", "before_ff"])
    def test_fresh_tan_is_pass_through(self, site):
        model = _model(tan_site=site)
        _randomize_heads(model)
        text = _text(model)
        z = _inputs(4)
        on = forward_joint(*z, 7, text, model, BOTH)
        off = forward_joint(*z, 7, text, model, ILS_ONLY)
        for a, b in zip(on, off):
            assert torch.equal(a, b)
        assert not torch.equal(on[0], torch.zeros_like(on[0]))

    def test_deterministic(self):
        model = _model()
        _randomize_heads(model)
        with torch.no_grad():
            for p in trainable_parameters(model).values():
                p.normal_(0, 0.1)
        z, text = _inputs(5), _text(model)
        a = forward_joint(*z, 2, text, model, BOTH)
        b = forward_joint(*z, 2, text, model, BOTH)
        assert all(torch.equal(x, y) for x, y in zip(a, b))

    def test_layout_gradient_reaches_image_lora(self):
        model = _model()
        _randomize_heads(model)
        freeze_for_finetune(model)
        q = model.image.blocks[0].cross_attn.q.lora
        params = [q.A, q.B]
        z, text = _inputs(6), _text(model)
        for toggles, flows in ((ILS_ONLY, True), (NEITHER, False)):
            _, eps_d, eps_m = forward_joint(*z, 5, text, model, toggles)
            grads = torch.autograd.grad(
                (eps_d**2).sum() + (eps_m**2).sum(), params, allow_unused=True
            )
            moved = any(g is not None and bool(g.abs().sum() > 0) for g in grads)
            assert moved == flows

    def test_errors(self):
        model = _model()
        z_i, z_d, z_m = _inputs(7)
        text = _text(model)
        with pytest.raises(ValueError):
            forward_joint(z_i, z_d[:, :, :2, :2], z_m, 1, text, model, BOTH)
        with pytest.raises(ValueError):
            forward_joint(z_i, z_d, z_m, 11, text, model, BOTH)
        no_tan = _model(with_tan=False)
        with pytest.raises(ValueError):
            forward_joint(z_i, z_d, z_m, 1, _text(no_tan), no_tan, BOTH)


class TestTrainableParameters:
    def test_empty_without_lora_and_tan(self):
        model = _model(with_tan=False, lora_rank_image=0, lora_rank_depth=0, lora_rank_mask=0)
        assert trainable_parameters(model) == {}

    def test_adapter_count(self):
        unit = LoraLinear(8, 8, rank=3)
        assert sum(p.numel() for p in trainable_parameters(unit).values()) == 2 * 3 * 8

    def test_only_lora_and_tan(self):
        model = _model()
        trainable = freeze_for_finetune(model)
        assert trainable
        assert all(".lora." in name or name.startswith("tan.") for name in trainable)
        for name, p in model.named_parameters():
            assert p.requires_grad == (name in trainable)
        assert len(model.tan["image"]) == len(model.share_map)

    def test_patch_embedding_gradients(self):
        assert grad_check("patch_embed").passed


if __name__ == "__main__":
    TestForwardJoint().test_shared_layouts_are_bit_identical()
