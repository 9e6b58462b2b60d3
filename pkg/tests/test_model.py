import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from rolesep import augment as aug
from rolesep.arcdata import Grid
from rolesep.model import (
    ModelConfig,
    ModelError,
    RoleSeparatedTransformer,
    TaskIndexOutOfRange,
    build_mask,
    desk_config,
    load_model,
    full_size_config,
    save_model,
)
from rolesep.numerics import ParamStore, cross_entropy, grad_check


def tiny(variant="d", **kw):
    cfg = dict(embed_dim=16, depth=2, canvas=8, patch=2, heads=2, variant=variant, max_demos=3)
    cfg.update(kw)
    return ModelConfig(**cfg)


def random_batch(cfg, B=2, m=2, seed=0):
    g = torch.Generator().manual_seed(seed)
    C = cfg.canvas
    q = torch.randint(12, (B, C, C), generator=g)
    dx = torch.randint(12, (B, m, C, C), generator=g)
    dy = torch.randint(12, (B, m, C, C), generator=g)
    return q, dx, dy


def neighbors_bruteforce(G, i):
    r, c = divmod(i, G)
    return {
        rr * G + cc
        for rr in range(G)
        for cc in range(G)
        if max(abs(rr - r), abs(cc - c)) <= 1
    }


def test_mask_examples():
    m = build_mask("c", 2, 2)
    assert m.allow.shape == (6, 6)
    for i in range(2, 6):
        assert set(np.flatnonzero(m.allow[i])) == {0, 1}
    d = build_mask("d", 2, 3)
    assert d.allow[2 + 4].sum() == 2 + 1 + 8  # center of the 3x3 lattice
    assert d.allow[2 + 0].sum() == 2 + 1 + 3  # corner
    for v in "abcd":
        assert build_mask(v, 3, 4).allow[:3].all()


@pytest.mark.parametrize("variant", "abcd")
@pytest.mark.parametrize("P,G", [(1, 1), (2, 5), (4, 3), (5, 7)])
def test_mask_rows_match_bruteforce(variant, P, G):
    m = build_mask(variant, P, G).allow
    for i in range(G * G):
        expect = set(range(P))
        if variant in "bd":
            expect |= {P + j for j in neighbors_bruteforce(G, i)}
        assert set(np.flatnonzero(m[P + i])) == expect


def test_mask_rejects_bad_input():
    with pytest.raises(ModelError):
        build_mask("e", 2, 2)
    with pytest.raises(ModelError):
        build_mask("d", 0, 2)


def test_config_invariants():
    with pytest.raises(ModelError):
        ModelConfig(canvas=15, patch=2)
    with pytest.raises(ModelError):
        ModelConfig(embed_dim=30, heads=4)
    with pytest.raises(ModelError):
        ModelConfig(ema_alpha=1.0)
    assert full_size_config().n_heads == 8
    assert desk_config().n_heads == 2 and desk_config().embed_dim == 64


def test_workspace_token_count():
    assert full_size_config().n_patches == 1024
    model = RoleSeparatedTransformer(tiny())
    assert model.embed_workspace(torch.zeros(1, 8, 8, dtype=torch.long)).shape == (1, 16, 16)


def test_patch_locality():
    model = RoleSeparatedTransformer(tiny())
    a = torch.full((1, 8, 8), aug.BACKGROUND)
    b = a.clone()
    b[0, 5, 2] = 3
    ea, eb = model.embed_workspace(a), model.embed_workspace(b)
    differs = (ea != eb).any(-1)[0]
    assert differs.nonzero().flatten().tolist() == [(5 // 2) * 4 + 2 // 2]


def test_context_token_identity_demo():
    model = RoleSeparatedTransformer(tiny())
    _, dx, _ = random_batch(model.cfg)
    c = model.context_tokens(dx, dx)
    zero = model.context_mlp(torch.zeros(16))
    assert torch.allclose(c, zero.expand_as(c), atol=1e-6)


@pytest.mark.usefixtures("float64")
def test_context_token_straight_line_oracle():
    cfg = tiny(embed_dim=4, heads=1)
    model = RoleSeparatedTransformer(cfg, seed=3).double()
    x = aug.apply(Grid.from_rows([[1, 2], [3, 0]]), aug.AugParams(0, 2, 2, 1, 8))
    y = aug.apply(Grid.from_rows([[4, 4], [4, 9]]), aug.AugParams(0, 2, 2, 1, 8))
    got = model.context_tokens(torch.tensor(x)[None], torch.tensor(y)[None])[0].detach().numpy()

    W = model.patch_embed.weight.detach().numpy()  # [D, p*p*12]
    bias = model.patch_embed.bias.detach().numpy()
    pos_r, pos_c = model.row_pos.detach().numpy(), model.col_pos.detach().numpy()

    def embed(canvas):
        toks = []
        for pr in range(4):
            for pc in range(4):
                v = bias.copy()
                for dr in range(2):
                    for dc in range(2):
                        sym = canvas[2 * pr + dr, 2 * pc + dc]
                        v = v + W[:, (dr * 2 + dc) * 12 + sym]
                toks.append(v + pos_r[pr] + pos_c[pc])
        return np.array(toks)

    mean_delta = (embed(y) - embed(x)).mean(axis=0)
    fc1w, fc1b = model.context_mlp.fc1.weight.detach().numpy(), model.context_mlp.fc1.bias.detach().numpy()
    fc2w, fc2b = model.context_mlp.fc2.weight.detach().numpy(), model.context_mlp.fc2.bias.detach().numpy()
    hidden = fc1w @ mean_delta + fc1b
    gelu = 0.5 * hidden * (1 + np.vectorize(math.erf)(hidden / math.sqrt(2)))
    expect = fc2w @ gelu + fc2b
    np.testing.assert_allclose(got, expect, atol=1e-12)


def test_context_token_shape_mismatch():
    model = RoleSeparatedTransformer(tiny())
    with pytest.raises(ModelError):
        model.context_tokens(torch.zeros(1, 8, 8, dtype=torch.long), torch.zeros(1, 2, 8, 8, dtype=torch.long))


def test_build_controller():
    model = RoleSeparatedTransformer(tiny(max_demos=4, n_task_embeddings=3))
    _, dx, dy = random_batch(model.cfg, B=1, m=3)
    g = model.build_controller(torch.tensor([1]), dx, dy)
    assert g.shape == (1, 4, 16)
    assert build_mask("d", g.shape[1], 4).allow[4:].sum(1).max() <= 13
    assert torch.allclose(g[0, 0] - model.role_embed[0], model.task_embed[1])
    perm = [2, 0, 1]
    gp = model.build_controller(torch.tensor([1]), dx[:, perm], dy[:, perm])
    core, core_p = g - model.role_embed[:4], gp - model.role_embed[:4]
    assert torch.allclose(core_p[0, 1:], core[0, 1:][perm], atol=1e-6)
    with pytest.raises(ModelError):
        model.build_controller(None, dx[:, :0], dy[:, :0])
    with pytest.raises(TaskIndexOutOfRange):
        model.build_controller(torch.tensor([3]), dx, dy)


def test_ttt_token_is_mean_of_task_embeddings():
    model = RoleSeparatedTransformer(tiny(n_task_embeddings=5))
    with torch.no_grad():
        model.ttt_token.zero_()
    model.reset_ttt_token()
    assert torch.allclose(model.ttt_token, model.task_embed.mean(0))


def _zero_block_outputs(block):
    for lin in [block.struct.proj, block.mlp.fc2] + ([block.dense.proj] if block.dense is not None else []):
        torch.nn.init.zeros_(lin.weight)
        torch.nn.init.zeros_(lin.bias)


@pytest.mark.parametrize("variant", "abcd")
def test_zeroed_block_is_identity(variant):
    model = RoleSeparatedTransformer(tiny(variant))
    blk = model.blocks[0]
    _zero_block_outputs(blk)
    h = torch.randn(2, 3 + 16, 16)
    mask = model.structured_mask(3)
    assert torch.equal(blk(h, mask), h)


def test_c_and_d_differ_only_in_neighbor_columns():
    model = RoleSeparatedTransformer(tiny("c", depth=1))
    q = torch.full((1, 8, 8), aug.BACKGROUND)
    _, dx, dy = random_batch(model.cfg, B=1)
    out_c = model(q, dx, dy, record_attention=True)
    model.set_variant("d")
    out_d = model(q, dx, dy, record_attention=True)
    P = 3
    wc = out_c.attention[1]["weights"][0]  # structured pass, [H, S, S]
    wd = out_d.attention[1]["weights"][0]
    assert torch.equal(out_c.attention[0]["weights"], out_d.attention[0]["weights"])  # dense pass unchanged
    assert not torch.allclose(out_c.logits, out_d.logits)
    # restricted to the controller columns, d's workspace weights renormalize to c's
    ctrl = wd[:, P:, :P]
    assert torch.allclose(ctrl / ctrl.sum(-1, keepdim=True), wc[:, P:, :P], atol=1e-6)
    assert torch.allclose(wd[:, :P], wc[:, :P])  # controller rows identical


@pytest.mark.parametrize("variant", "ac")
def test_structured_pass_information_barrier(variant):
    model = RoleSeparatedTransformer(tiny(variant, depth=1))
    blk = model.blocks[0]
    if blk.dense is not None:
        torch.nn.init.zeros_(blk.dense.proj.weight)
        torch.nn.init.zeros_(blk.dense.proj.bias)
    P, L = 3, 16
    mask = model.structured_mask(P)
    g = torch.Generator().manual_seed(0)
    for trial in range(5):
        h = torch.randn(1, P + L, 16, generator=g)
        j = int(torch.randint(L, (1,), generator=g))
        h2 = h.clone()
        h2[0, P + j] += torch.randn(16, generator=g)
        a, b = blk(h, mask), blk(h2, mask)
        others = [P + i for i in range(L) if i != j]
        assert torch.equal(a[0, others], b[0, others])
        assert not torch.allclose(a[0, :P], b[0, :P])  # controller sees everything


def test_variant_d_breaks_barrier_locally():
    model = RoleSeparatedTransformer(tiny("d", depth=1))
    P = 3
    mask = model.structured_mask(P)
    h = torch.randn(1, P + 16, 16)
    h2 = h.clone()
    h2[0, P + 5] += 1.0
    a, b = model.blocks[0](h, mask), model.blocks[0](h2, mask)
    assert not torch.equal(a[0, P + 0], b[0, P + 0])


def test_output_head_null_and_shape():
    model = RoleSeparatedTransformer(tiny())
    torch.nn.init.zeros_(model.head.weight)
    torch.nn.init.zeros_(model.head.bias)
    logits = model.output_head(torch.randn(2, 16, 16))
    assert logits.shape == (2, 64, 11)
    t = torch.randint(11, (64,))
    assert float(cross_entropy(logits[0], t).detach()) == pytest.approx(math.log(11), abs=1e-6)


def test_output_head_hand_weights_decode():
    cfg = tiny(embed_dim=4, heads=1)
    model = RoleSeparatedTransformer(cfg)
    rng = np.random.default_rng(0)
    patterns = rng.integers(11, size=(4, 2, 2))  # patch type d -> classes of its 2x2 cells
    W = torch.zeros(4 * 11, 4)
    for d in range(4):
        for dr in range(2):
            for dc in range(2):
                W[(dr * 2 + dc) * 11 + patterns[d, dr, dc], d] = 1.0
    with torch.no_grad():
        model.head.weight.copy_(W)
        model.head.bias.zero_()
    types = rng.integers(4, size=16)
    feats = F.one_hot(torch.tensor(types), 4).float()[None]
    pred = model.output_head(feats).argmax(-1).reshape(8, 8).numpy()
    expect = np.zeros((8, 8), dtype=int)
    for i, d in enumerate(types):
        r, c = divmod(i, 4)
        expect[2 * r : 2 * r + 2, 2 * c : 2 * c + 2] = patterns[d]
    assert np.array_equal(pred, expect)


def test_correctness_head():
    model = RoleSeparatedTransformer(tiny())
    torch.nn.init.zeros_(model.correct_head.weight)
    torch.nn.init.zeros_(model.correct_head.bias)
    assert torch.equal(model.correctness_head(torch.randn(3, 16, 16)), torch.full((3,), 0.5))
    with torch.no_grad():
        model.correct_head.bias.fill_(1.0)
    assert float(model.correctness_head(torch.randn(1, 16, 16)).detach()) == pytest.approx(0.7310585786, abs=1e-6)
    p = RoleSeparatedTransformer(tiny(), seed=4).correctness_head(10 * torch.randn(5, 16, 16))
    assert ((p > 0) & (p < 1)).all()


def test_forward_shapes_and_mid_logits():
    model = RoleSeparatedTransformer(tiny(recur_steps=4))
    out = model(*random_batch(model.cfg))
    assert out.logits.shape == (2, 64, 11)
    assert out.mid_logits is not None and out.mid_logits.shape == (2, 64, 11)
    assert out.correctness.shape == (2,)
    model1 = RoleSeparatedTransformer(tiny(recur_steps=2))
    assert model1(*random_batch(model1.cfg)).mid_logits is None


def test_attention_record_counts():
    model = RoleSeparatedTransformer(tiny("d", recur_steps=2))
    out = model(*random_batch(model.cfg), record_attention=True)
    keys = [(r["step"], r["layer"], r["pass"]) for r in out.attention]
    assert keys == [(s, l, p) for s in range(2) for l in range(2) for p in ("dense", "structured")]


def test_variant_switch_rules():
    model = RoleSeparatedTransformer(tiny("a"))
    model.set_variant("b")
    with pytest.raises(ModelError):
        model.set_variant("d")


@pytest.mark.usefixtures("float64")
@pytest.mark.parametrize("variant", "abcd")
def test_end_to_end_grad_check(variant):
    model = RoleSeparatedTransformer(tiny(variant, depth=1, recur_steps=2), seed=1).double()
    q, dx, dy = random_batch(model.cfg)
    t = torch.randint(11, (2, 64), generator=torch.Generator().manual_seed(2))

    def f(store):
        out = model(q, dx, dy)
        return cross_entropy(out.logits.reshape(-1, 11), t.reshape(-1)) + out.correctness.sum()

    assert grad_check(f, ParamStore.from_module(model), sample=60, seed=3) < 1e-3


def test_checkpoint_round_trip(tmp_path):
    model = RoleSeparatedTransformer(tiny("c", recur_steps=3), seed=5)
    save_model(tmp_path / "m.ck", model, {"note": "x"})
    loaded, meta = load_model(tmp_path / "m.ck")
    assert meta["note"] == "x" and loaded.cfg == model.cfg
    for (k, a), (_, b) in zip(model.state_dict().items(), loaded.state_dict().items()):
        assert torch.equal(a, b), k
    save_model(tmp_path / "m2.ck", loaded, {"note": "x"})
    assert (tmp_path / "m.ck").read_bytes() == (tmp_path / "m2.ck").read_bytes()
