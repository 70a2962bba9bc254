import pytest
import torch
from audit import finite_difference_grads, jitter, relative_error, tiny_config

from sddit.masking import PatchMask, patchify, sample_mask
from sddit.network import (
    PRESETS,
    ModelConfig,
    ProjectionHead,
    StudentBranch,
    TeacherBranch,
    ema_manifest,
    parameter_manifest,
    sincos_2d,
)


@pytest.fixture
def student():
    torch.manual_seed(0)
    return StudentBranch(ModelConfig(embed_dim=32, depth_encoder=2, depth_decoder=2, proj_dim=16, proj_hidden=32))


def cn(*values):
    return torch.tensor(values, dtype=torch.float32)


class TestConfig:
    def test_heads_must_divide(self):
        with pytest.raises(ValueError):
            ModelConfig(embed_dim=30, n_heads=4)

    def test_k_at_least_two(self):
        with pytest.raises(ValueError):
            ModelConfig(proj_dim=1)

    def test_presets(self):
        assert PRESETS["DiT-XL/2"].embed_dim == 1152
        assert all(c.depth_decoder == 8 and c.proj_dim == 8192 for c in PRESETS.values())


class TestConditionEmbedding:
    def test_deterministic_and_shape(self, student):
        e1 = student.encoder.cond(cn(0.1, -0.4), torch.tensor([0, 1]))
        e2 = student.encoder.cond(cn(0.1, -0.4), torch.tensor([0, 1]))
        assert e1.shape == (2, 32)
        assert torch.equal(e1, e2)

    def test_classes_differ(self, student):
        e = student.encoder.cond(cn(0.2, 0.2, 0.2), torch.tensor([0, 1, 2]))
        assert not torch.equal(e[0], e[1]) and not torch.equal(e[1], e[2])

    @pytest.mark.parametrize("label", [-1, 3])
    def test_out_of_range(self, student, label):
        with pytest.raises(ValueError):
            student.encoder.cond(cn(0.0), torch.tensor([label]))


class TestEncoder:
    def test_cls_prepended(self, student):
        tokens = torch.randn(2, 16, 32)
        cond = student.encoder.cond(cn(0.1, 0.1), torch.tensor([0, 1]))
        assert student.encoder(tokens, cond).shape == (2, 17, 32)

    def test_identity_at_init(self, student):
        tokens = torch.randn(2, 9, 32)
        cond = student.encoder.cond(cn(0.3, -1.0), torch.tensor([0, 1]))
        out = student.encoder(tokens, cond)
        assert torch.equal(out[:, 1:], tokens)
        assert torch.equal(out[:, 0], student.encoder.cls_token[0, 0].expand(2, -1))

    def test_permutation_equivariance(self, student):
        student = student.double()
        jitter(student, 1)
        g = torch.Generator().manual_seed(3)
        raw = torch.randn(1, 16, 4, generator=g, dtype=torch.float64)
        embedded = student.encoder.embed_patches(raw)
        cond = student.encoder.cond(torch.tensor([0.2], dtype=torch.float64), torch.tensor([1]))
        perm = torch.randperm(16, generator=g)
        out = student.encoder(embedded, cond)
        out_p = student.encoder(embedded[:, perm], cond)
        assert torch.allclose(out_p[:, 1:], out[:, 1:][:, perm], atol=1e-12)
        assert torch.allclose(out_p[:, 0], out[:, 0], atol=1e-12)

    def test_empty_rejected(self, student):
        cond = student.encoder.cond(cn(0.0), torch.tensor([0]))
        with pytest.raises(ValueError):
            student.encoder(torch.zeros(1, 0, 32), cond)

    def test_positions_follow_grid_index(self):
        table = sincos_2d(16, 4, 4)
        assert table.shape == (16, 16)
        assert len({tuple(r.tolist()) for r in table}) == 16


class TestDecoder:
    @pytest.mark.parametrize("ratio", [0.0, 0.25, 0.5, 0.9])
    def test_full_length_every_ratio(self, student, ratio):
        seen = []
        hook = student.decoder.register_forward_pre_hook(lambda m, args: seen.append(args[0].shape[1]))
        x = torch.randn(2, 1, 8, 8)
        mask = sample_mask(16, ratio, torch.Generator().manual_seed(0), batch=2)
        out, enc = student(x, cn(0.1, 0.2), torch.tensor([0, 1]), mask)
        hook.remove()
        assert seen == [16]
        assert out.shape == x.shape
        assert enc.shape[1] == 1 + 16 - int(16 * ratio + 1e-9)

    def test_wrong_length(self, student):
        cond = student.encoder.cond(cn(0.0), torch.tensor([0]))
        with pytest.raises(ValueError):
            student.decoder(torch.zeros(1, 15, 32), cond)

    def test_deterministic(self, student):
        h = torch.randn(2, 16, 32)
        cond = student.encoder.cond(cn(0.1, 0.1), torch.tensor([0, 0]))
        assert torch.equal(student.decoder(h, cond), student.decoder(h, cond))

    def test_gradients_reach_every_decoder_parameter(self):
        cfg = tiny_config().model
        torch.manual_seed(1)
        model = StudentBranch(cfg).double()
        jitter(model.decoder, 2)
        g = torch.Generator().manual_seed(4)
        h = torch.randn(2, 4, 8, generator=g, dtype=torch.float64)
        cond = model.encoder.cond(torch.tensor([0.1, -0.3], dtype=torch.float64), torch.tensor([0, 1])).detach()
        weights = torch.randn(2, 4, 4, generator=g, dtype=torch.float64)

        def fn():
            return (model.decoder(h, cond) * weights).sum()

        params = list(model.decoder.parameters())
        analytic = torch.autograd.grad(fn(), params)
        numeric = finite_difference_grads(fn, params)
        for a, b in zip(analytic, numeric):
            assert a.abs().max() > 0
            assert relative_error(a, b) <= 1e-4

    def test_gates_only_at_init(self, student):
        # adaLN-zero: at init only the modulation and final layers can receive gradient
        h = torch.randn(2, 16, 32)
        cond = student.encoder.cond(cn(0.1, 0.1), torch.tensor([0, 1])).detach()
        student.decoder(h, cond).pow(2).sum().backward()
        for name, p in student.decoder.named_parameters():
            if name.startswith("final.") or "adaLN_modulation" in name:
                continue
            assert p.grad is None or torch.all(p.grad == 0), name


class TestProjectionHead:
    def test_width(self):
        head = ProjectionHead(8, 16, 32)
        for n in (1, 5):
            assert head(torch.randn(2, n, 8)).shape == (2, n, 32)

    def test_zero_last_layer(self):
        head = ProjectionHead(8, 16, 32)
        torch.nn.init.zeros_(head.mlp[-1].weight)
        torch.nn.init.zeros_(head.mlp[-1].bias)
        logits = head(torch.randn(3, 8))
        assert torch.equal(logits, torch.zeros(3, 32))
        assert torch.allclose(torch.softmax(logits, -1), torch.full((3, 32), 1 / 32))

    def test_pointwise(self):
        head = ProjectionHead(8, 16, 32)
        t = torch.randn(1, 8).expand(2, 8)
        out = head(t)
        assert torch.equal(out[0], out[1])


class TestManifest:
    def test_teacher_matches_student_encoder_and_head(self, student):
        teacher = TeacherBranch(student)
        assert parameter_manifest(teacher) == ema_manifest(student)
        assert not any(p.requires_grad for p in teacher.parameters())

    def test_no_mask_token(self, student):
        names = [n for n, _ in parameter_manifest(student)]
        assert not any("mask" in n.lower() for n in names)
        # nothing other than the [CLS] token is a free-standing embedding vector
        free = [n for n, p in student.named_parameters() if n.endswith("_token")]
        assert free == ["encoder.cls_token"]

    def test_gates_zero_at_init(self, student):
        for name, p in student.named_parameters():
            if "adaLN_modulation.1" in name:
                assert torch.all(p == 0), name

    def test_unmasked_forward_matches_explicit_pipeline(self, student):
        x = torch.randn(2, 1, 8, 8)
        c = cn(0.1, -0.2)
        labels = torch.tensor([0, 1])
        out_none, enc_none = student(x, c, labels, None)
        out_zero, enc_zero = student(x, c, labels, PatchMask.from_bits(torch.zeros(2, 16)))
        assert torch.allclose(out_none, out_zero) and torch.allclose(enc_none, enc_zero)
        assert patchify(out_none, 2).shape == (2, 16, 4)
