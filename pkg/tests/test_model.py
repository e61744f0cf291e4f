import numpy as np
import pytest
import torch

from protoscene.geometry import PointCloud
from protoscene.model import (STAGE_ANISO, STAGE_INTENSITIES, STAGE_POINTS,
                              STAGE_SCALES, STAGE_TRANSFORMS, ModelConfig,
                              SceneModel, init_prototypes)


def small_config(**kw):
    defaults = dict(num_slots=4, num_prototypes=3, points_per_prototype=32,
                    grid_resolution=8, voxel_size_m=1.0)
    defaults.update(kw)
    return ModelConfig(**defaults)


def random_patch(seed=0, n=120, with_intensity=True):
    rng = np.random.default_rng(seed)
    pos = rng.uniform(-1, 1, (n, 3)) * np.array([1, 1, 0.4]) + np.array([0, 0, 0.5])
    return PointCloud(pos, intensity=rng.random(n) if with_intensity else None,
                      frame="patch-normalized")


class TestInitPrototypes:
    def test_deterministic(self):
        cfg = small_config()
        a = init_prototypes(cfg, seed=5)
        b = init_prototypes(cfg, seed=5)
        assert torch.equal(a, b)

    def test_within_cuboid_bounds(self):
        cfg = small_config()
        pts = init_prototypes(cfg, seed=1).numpy()
        assert np.abs(pts).max() <= 0.3 + 1e-12
        for k in range(cfg.num_prototypes):
            half = np.abs(pts[k]).max(axis=0)
            assert np.all(half >= 0.0) and np.all(half <= 0.3)

    def test_empirical_mean_near_center(self):
        cfg = small_config(points_per_prototype=256)
        pts = init_prototypes(cfg, seed=2).numpy()
        for k in range(cfg.num_prototypes):
            half = np.abs(pts[k]).max(axis=0)  # lower bound on true half-extent
            # uniform on [-h, h]: mean 0, sd h/sqrt(3); 3 sigma of the mean
            bound = 3 * half / np.sqrt(3 * 256)
            assert np.all(np.abs(pts[k].mean(axis=0)) <= bound + half * 0.05)


class TestEncoder:
    def test_output_dimensionality(self):
        model = SceneModel(small_config(), seed=0)
        feat = model.encoder([random_patch()])
        assert feat.shape == (1, 1024)

    def test_permutation_invariance(self):
        model = SceneModel(small_config(), seed=0)
        patch = random_patch(3)
        perm = np.random.default_rng(0).permutation(len(patch))
        a = model.encoder([patch]).detach().numpy()
        b = model.encoder([patch.select(perm)]).detach().numpy()
        assert np.abs(a - b).max() < 1e-5

    def test_duplication_invariance(self):
        model = SceneModel(small_config(), seed=0)
        patch = random_patch(4)
        doubled = patch.select(np.repeat(np.arange(len(patch)), 2))
        a = model.encoder([patch]).detach().numpy()
        b = model.encoder([doubled]).detach().numpy()
        assert np.abs(a - b).max() < 1e-5

    def test_empty_patch_raises(self):
        model = SceneModel(small_config(), seed=0)
        empty = PointCloud(np.empty((0, 3)), frame="patch-normalized")
        with pytest.raises(ValueError):
            model.encoder([empty])


class TestSlotHeads:
    def test_identity_at_init(self):
        model = SceneModel(small_config(), seed=0)
        cand = model.reconstruct([random_patch()])
        assert torch.all(cand.tilt_y == 0)
        assert torch.all(cand.rot_z == 0)
        assert torch.all(cand.translation == 0)
        assert torch.all(cand.scale == 1)

    def test_probability_coherence(self):
        model = SceneModel(small_config(), seed=0)
        # perturb the head so probabilities are non-uniform
        with torch.no_grad():
            for p in model.head_proba.parameters():
                p.add_(torch.randn_like(p) * 0.3)
        cand = model.reconstruct([random_patch()])
        total = (1 - cand.alpha) + cand.beta.sum(-1)
        assert torch.allclose(total, torch.ones_like(total), atol=1e-6)
        assert torch.all(cand.beta >= 0)
        assert torch.all(cand.alpha >= 0)

    def test_rotz_unit_circle_mapping(self):
        assert float(torch.atan2(torch.tensor(0.8), torch.tensor(0.6))) == \
            pytest.approx(np.arctan2(0.8, 0.6))

    def test_scale_gating_by_stage(self):
        model = SceneModel(small_config(), seed=0)
        with torch.no_grad():
            for p in model.head_scale.parameters():
                p.add_(torch.randn_like(p) * 0.5)
        patch = random_patch()
        model.set_stage(STAGE_TRANSFORMS)
        assert torch.all(model.reconstruct([patch]).scale == 1)
        model.set_stage(STAGE_SCALES)
        scale = model.reconstruct([patch]).scale
        # tied: all three channels share one value per slot
        assert torch.allclose(scale[..., 0], scale[..., 1])
        assert torch.allclose(scale[..., 0], scale[..., 2])
        lo, hi = model.config.scale_bounds
        assert torch.all(scale >= lo) and torch.all(scale <= hi)
        model.set_stage(STAGE_ANISO)
        scale = model.reconstruct([patch]).scale
        assert not torch.allclose(scale[..., 0], scale[..., 1])


class TestReconstruct:
    def test_candidate_count(self):
        cfg = small_config()
        model = SceneModel(cfg, seed=0)
        cand = model.reconstruct([random_patch()])
        assert cand.candidates.shape == (1, cfg.num_slots, cfg.num_prototypes,
                                         cfg.points_per_prototype, 3)

    def test_identity_heads_reproduce_prototypes(self):
        model = SceneModel(small_config(), seed=0)
        cand = model.reconstruct([random_patch()])
        proto = model.prototypes.points.detach()
        for s in range(model.config.num_slots):
            assert torch.equal(cand.candidates[0, s].detach(), proto)

    def test_base_scale_doubles_extent(self):
        model = SceneModel(small_config(), seed=0)
        model.set_stage(STAGE_SCALES)
        with torch.no_grad():
            model.prototypes.base_log_scale[1] = np.log(2.0)
        cand = model.reconstruct([random_patch()])
        proto = model.prototypes.points.detach()
        got = cand.candidates[0, 0, 1].detach().numpy()
        want = proto[1].numpy() * 2.0  # scaled about the origin of proto frame
        assert np.allclose(got, want, atol=1e-6)

    def test_full_affine_mode(self):
        model = SceneModel(small_config(transform_mode="full-affine"), seed=0)
        cand = model.reconstruct([random_patch()])
        # zero-init last layers -> affine = identity
        proto = model.prototypes.points.detach()
        assert torch.allclose(cand.candidates[0, 0].detach(), proto, atol=1e-6)
        with torch.no_grad():
            model.head_affine[-1].bias.add_(torch.randn(9) * 0.1)
        cand = model.reconstruct([random_patch()])
        assert not torch.allclose(cand.candidates[0, 0].detach(), proto)


class TestInfer:
    def setup_decomp(self, alphas, betas):
        cfg = small_config(num_slots=len(alphas), num_prototypes=betas.shape[1])
        model = SceneModel(cfg, seed=0)
        patch = random_patch()

        alphas_t = torch.tensor(alphas, dtype=torch.float32)
        betas_t = torch.tensor(betas, dtype=torch.float32)

        def fake_slot_params(feature):
            b = feature.shape[0]
            s, k = cfg.num_slots, cfg.num_prototypes
            return {
                "alpha": alphas_t[None].expand(b, s),
                "beta": betas_t[None].expand(b, s, k),
                "tilt_y": torch.zeros(b, s), "rot_z": torch.zeros(b, s),
                "translation": torch.zeros(b, s, 3),
                "scale": torch.ones(b, s, 3),
                "logits": torch.zeros(b, s, k + 1),
            }

        model.slot_params = fake_slot_params
        return model, patch

    def test_threshold_semantics(self):
        betas = np.array([[0.45, 0.45], [0.15, 0.15]])
        model, patch = self.setup_decomp([0.9, 0.3], betas)
        decomp = model.infer(patch)
        assert [sd.slot for sd in decomp.slots] == [0]

    def test_argmax_prototype(self):
        betas = np.array([[0.2, 0.5, 0.2]])
        model, patch = self.setup_decomp([0.9], betas)
        decomp = model.infer(patch)
        assert decomp.slots[0].prototype == 1

    def test_argmax_scale_invariant(self):
        betas = np.array([[0.2, 0.5, 0.2]])
        model, patch = self.setup_decomp([0.9], betas * 1.7)
        assert model.infer(patch).slots[0].prototype == 1

    def test_exact_half_inactive(self):
        betas = np.array([[0.25, 0.25]])
        model, patch = self.setup_decomp([0.5], betas)
        decomp = model.infer(patch)
        assert decomp.empty
        assert np.all(decomp.point_slot == -1)


class TestCurriculumFreezing:
    def test_group_unlock_order(self):
        model = SceneModel(small_config(), seed=0)
        expect = {
            STAGE_TRANSFORMS: {"network"},
            STAGE_INTENSITIES: {"network", "proto_intensity"},
            STAGE_SCALES: {"network", "proto_intensity", "proto_scale", "scale_head"},
            STAGE_POINTS: {"network", "proto_intensity", "proto_scale",
                           "scale_head", "proto_points"},
            STAGE_ANISO: {"network", "proto_intensity", "proto_scale",
                          "scale_head", "proto_points", "proto_aniso"},
        }
        for stage, groups in expect.items():
            assert model.unlocked_groups(stage) == groups

    def test_frozen_params_have_no_grad(self):
        model = SceneModel(small_config(), seed=0)
        model.apply_stage_freezing(STAGE_TRANSFORMS)
        assert not model.prototypes.points.requires_grad
        assert model.encoder.point_encoder.weight.requires_grad
        model.apply_stage_freezing(STAGE_ANISO)
        assert model.prototypes.aniso_log_scale.requires_grad


class TestGradientFlow:
    def test_chamfer_gradients_match_finite_differences(self):
        # analytic vs central finite differences on a 10-point toy
        torch.manual_seed(0)
        rng = np.random.default_rng(0)
        x = torch.tensor(rng.uniform(-1, 1, (10, 3)), dtype=torch.float64)
        proto = torch.tensor(rng.uniform(-0.3, 0.3, (10, 3)), dtype=torch.float64,
                             requires_grad=True)
        trans = torch.tensor([0.1, -0.2, 0.05], dtype=torch.float64, requires_grad=True)
        rotz = torch.tensor(0.3, dtype=torch.float64, requires_grad=True)

        def loss_fn(proto_, trans_, rotz_):
            c, s = torch.cos(rotz_), torch.sin(rotz_)
            r = torch.stack([
                torch.stack([c, -s, torch.zeros_like(c)]),
                torch.stack([s, c, torch.zeros_like(c)]),
                torch.stack([torch.zeros_like(c), torch.zeros_like(c),
                             torch.ones_like(c)])])
            y = proto_ @ r.T + trans_
            d2 = ((y[:, None, :] - x[None, :, :]) ** 2).sum(-1)
            return d2.min(dim=1).values.mean()

        loss = loss_fn(proto, trans, rotz)
        loss.backward()
        eps = 1e-6
        for tensor in (proto, trans, rotz):
            grad = tensor.grad
            flat = tensor.detach().reshape(-1)
            for i in range(flat.numel()):
                plus, minus = tensor.detach().clone(), tensor.detach().clone()
                plus.reshape(-1)[i] += eps
                minus.reshape(-1)[i] -= eps
                args = {id(proto): (plus if tensor is proto else proto.detach()),
                        id(trans): (plus if tensor is trans else trans.detach()),
                        id(rotz): (plus if tensor is rotz else rotz.detach())}
                fp = loss_fn(plus if tensor is proto else proto.detach(),
                             plus if tensor is trans else trans.detach(),
                             plus if tensor is rotz else rotz.detach())
                fm = loss_fn(minus if tensor is proto else proto.detach(),
                             minus if tensor is trans else trans.detach(),
                             minus if tensor is rotz else rotz.detach())
                fd = (float(fp) - float(fm)) / (2 * eps)
                an = float(grad.reshape(-1)[i])
                assert an == pytest.approx(fd, rel=1e-4, abs=1e-8)
