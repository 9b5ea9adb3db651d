"""Pyramid blocks: spans, fusion stages, paths, integration, and topology."""

import re

import numpy as np
import pytest

import minifpn.engine as eng
from minifpn.engine import Tensor
from minifpn.errors import ConfigError, ContractError, ShapeError
from minifpn.gradcheck import finite_diff_check
from minifpn.pyramid import (Backbone, BiFusionPath, BottomUpFusion, CoreBlock,
                             FeatureMap, FusionStage, PyramidConfig, PyramidModel,
                             Reorg, export_topology, integrate_maps, layer_span,
                             resample_to_level)


def fmap(level, channels=3, side=None, seed=0, batch=1, dtype=np.float64,
         nonneg=False):
    """Random feature map at `level`; side defaults to 64 / stride."""
    if side is None:
        side = 64 // 2 ** (level - 1)
    rng = np.random.default_rng(seed + 97 * level)
    data = rng.normal(size=(batch, channels, side, side))
    if nonneg:
        data = np.abs(data)
    return FeatureMap(Tensor(data.astype(dtype)), level)


def identity_pointwise(layer):
    """Overwrite a 1x1 layer with the exact identity map."""
    c = layer.weight.shape[0]
    layer.weight.data = np.eye(c, dtype=layer.weight.dtype).reshape(c, c, 1, 1)
    layer.bias.data = np.zeros_like(layer.bias.data)


def identity_conv3x3(layer):
    """Overwrite a 3x3 same-pad conv with the exact identity map."""
    c = layer.weight.shape[0]
    w = np.zeros_like(layer.weight.data)
    for i in range(c):
        w[i, i, 1, 1] = 1.0
    layer.weight.data = w
    layer.bias.data = np.zeros_like(layer.bias.data)


def kahn_sort(nodes, edges):
    """Topological sort; returns None when the graph has a cycle."""
    indeg = {n: 0 for n in nodes}
    adj = {n: [] for n in nodes}
    for a, b in edges:
        adj[a].append(b)
        indeg[b] += 1
    ready = [n for n in nodes if indeg[n] == 0]
    order = []
    while ready:
        n = ready.pop()
        order.append(n)
        for m in adj[n]:
            indeg[m] -= 1
            if indeg[m] == 0:
                ready.append(m)
    return order if len(order) == len(nodes) else None


def parse_dot(text):
    nodes = re.findall(r'^\s*"([^"]+)" \[', text, flags=re.M)
    edges = re.findall(r'^\s*"([^"]+)" -> "([^"]+)"', text, flags=re.M)
    return nodes, edges


class TestLayerSpan:
    def test_first_path_spans_top_levels(self):
        assert layer_span(1, 5, 3) == [5, 4, 3]

    def test_last_path_reaches_level_one(self):
        assert layer_span(3, 5, 3) == [3, 2, 1]

    def test_single_map_is_top_level(self):
        for levels in range(1, 8):
            assert layer_span(1, levels, 1) == [levels]

    def test_underflow_rejected(self):
        with pytest.raises(ConfigError):
            layer_span(3, 4, 3)

    def test_bad_path_index_rejected(self):
        with pytest.raises(ConfigError):
            layer_span(0, 5, 3)
        with pytest.raises(ConfigError):
            layer_span(4, 5, 3)

    def test_exhaustive_small_configs(self):
        for num_maps in range(1, 5):
            for num_levels in range(2 * num_maps - 1, 10):
                for path in range(1, num_maps + 1):
                    span = layer_span(path, num_levels, num_maps)
                    assert len(span) == num_maps
                    assert span[0] == num_levels - path + 1
                    assert span[-1] == num_levels - path - num_maps + 2
                    assert all(a - b == 1 for a, b in zip(span, span[1:]))
                    assert span[-1] >= 1


class TestPyramidConfig:
    def test_depth_must_cover_spans(self):
        with pytest.raises(ConfigError):
            PyramidConfig(num_levels=4, num_maps=3, fuse_channels=4, head_channels=4)

    def test_minimum_depth_accepted(self):
        cfg = PyramidConfig(num_levels=5, num_maps=3, fuse_channels=4, head_channels=4)
        assert cfg.prediction_levels() == [5, 4, 3]

    def test_path_count_follows_parallel_toggle(self):
        base = dict(num_levels=5, num_maps=3, fuse_channels=4, head_channels=4)
        assert PyramidConfig(**base).num_paths == 1
        assert PyramidConfig(**base, use_parallel=True).num_paths == 3


class TestBackbone:
    def test_halving_chain_shapes(self):
        cfg = PyramidConfig(num_levels=5, num_maps=1, fuse_channels=4, head_channels=4)
        rng = np.random.default_rng(42)
        maps = Backbone("backbone", cfg, rng)(
            Tensor(np.random.default_rng(0).normal(size=(1, 3, 64, 64)).astype(np.float32)))
        assert [m.shape[2] for m in maps] == [64, 32, 16, 8, 4]
        assert [m.level for m in maps] == [1, 2, 3, 4, 5]
        assert all(m.shape[1] == 4 for m in maps)

    def test_minimal_two_level_pyramid(self):
        cfg = PyramidConfig(num_levels=2, num_maps=1, fuse_channels=2, head_channels=2)
        maps = Backbone("backbone", cfg, np.random.default_rng(0))(
            Tensor(np.zeros((1, 3, 8, 8), np.float32)))
        assert len(maps) == 2

    def test_parameter_count_closed_form(self):
        c, levels = 6, 4
        cfg = PyramidConfig(num_levels=levels, num_maps=1, fuse_channels=c,
                            head_channels=c)
        bb = Backbone("backbone", cfg, np.random.default_rng(0))
        expected = (3 * c * 9 + c) + (levels - 1) * (c * c * 9 + c)
        assert sum(p.data.size for p in bb.params()) == expected

    def test_indivisible_side_rejected(self):
        cfg = PyramidConfig(num_levels=4, num_maps=1, fuse_channels=2, head_channels=2)
        bb = Backbone("backbone", cfg, np.random.default_rng(0))
        with pytest.raises(ConfigError):
            bb(Tensor(np.zeros((1, 3, 20, 20), np.float32)))

    def test_non_square_rejected(self):
        cfg = PyramidConfig(num_levels=2, num_maps=1, fuse_channels=2, head_channels=2)
        bb = Backbone("backbone", cfg, np.random.default_rng(0))
        with pytest.raises(ConfigError):
            bb(Tensor(np.zeros((1, 3, 8, 16), np.float32)))


class TestReorg:
    def test_shape_contract(self):
        reorg = Reorg("r", 4, np.random.default_rng(42))
        out = reorg(fmap(2, channels=4, side=16, dtype=np.float32), target_level=3)
        assert out.shape == (1, 4, 8, 8)

    def test_level_mismatch_rejected(self):
        reorg = Reorg("r", 4, np.random.default_rng(42))
        with pytest.raises(ShapeError):
            reorg(fmap(2, channels=4, side=16, dtype=np.float32), target_level=4)

    def test_constant_preserved_by_subpixel_mean(self):
        c = 3
        reorg = Reorg("r", c, np.random.default_rng(42), dtype=np.float64)
        w = np.zeros((c, 4 * c, 1, 1))
        for o in range(c):
            w[o, 4 * o:4 * o + 4, 0, 0] = 0.25
        reorg.fuse.weight.data = w
        reorg.fuse.bias.data = np.zeros_like(reorg.fuse.bias.data)
        values = np.arange(1.0, c + 1).reshape(1, c, 1, 1)
        const = FeatureMap(Tensor(np.broadcast_to(values, (1, c, 8, 8)).copy()), 1)
        out = reorg(const, target_level=2)
        np.testing.assert_allclose(out.data, np.broadcast_to(values, (1, c, 4, 4)))

    def test_gradient(self):
        reorg = Reorg("r", 2, np.random.default_rng(42), dtype=np.float64)
        shallow = fmap(1, channels=2, side=8)

        def model():
            out = reorg(shallow, target_level=2)
            return eng.sum_all(eng.mul(out, out))

        report = finite_diff_check(model, reorg.params(), n_probes=20)
        assert report.passed, report.summary()


class TestCoreBlock:
    def test_single_input_reduces_to_scale_fuse_activation(self):
        block = CoreBlock("b", 3, has_shallow=False, has_deep=False,
                          rng=np.random.default_rng(42), dtype=np.float64)
        current = fmap(3, channels=3)
        out = block(None, current, None)
        manual = eng.leaky_relu(block.fuse(block.scale(current.tensor)), 0.1)
        np.testing.assert_array_equal(out.tensor.data, manual.data)
        assert out.level == 3

    def test_constant_width_regardless_of_inputs(self):
        rng = np.random.default_rng(42)
        for has_shallow in (False, True):
            for has_deep in (False, True):
                block = CoreBlock("b", 5, has_shallow, has_deep, rng, dtype=np.float64)
                out = block(fmap(2, 5, side=16) if has_shallow else None,
                            fmap(3, 5, side=8),
                            fmap(4, 5, side=4) if has_deep else None)
                assert out.shape == (1, 5, 8, 8)

    def test_zero_fuse_weights_annihilate(self):
        block = CoreBlock("b", 4, True, True, np.random.default_rng(42),
                          dtype=np.float64)
        block.fuse.weight.data = np.zeros_like(block.fuse.weight.data)
        block.fuse.bias.data = np.zeros_like(block.fuse.bias.data)
        out = block(fmap(2, 4, side=8), fmap(3, 4, side=4), fmap(4, 4, side=2))
        np.testing.assert_array_equal(out.tensor.data, np.zeros((1, 4, 4, 4)))

    def test_missing_current_rejected(self):
        block = CoreBlock("b", 4, False, False, np.random.default_rng(0))
        with pytest.raises(ContractError):
            block(None, None, None)

    def test_presence_mismatch_rejected(self):
        block = CoreBlock("b", 4, has_shallow=True, has_deep=False,
                          rng=np.random.default_rng(0), dtype=np.float64)
        with pytest.raises(ContractError):
            block(None, fmap(3, 4, side=4), None)

    def test_deep_level_arithmetic_enforced(self):
        block = CoreBlock("b", 4, False, True, np.random.default_rng(0),
                          dtype=np.float64)
        with pytest.raises(ShapeError):
            block(None, fmap(3, 4, side=8), fmap(5, 4, side=8))


class TestFusionStage:
    def test_without_skip_equals_core_plus_conv(self):
        stage = FusionStage("s", 3, True, True, has_skip=False,
                            rng=np.random.default_rng(42), dtype=np.float64)
        shallow, current, deep = fmap(2, 3, side=8), fmap(3, 3, side=4), fmap(4, 3, side=2)
        out = stage(shallow, current, deep, None)
        manual = eng.leaky_relu(
            stage.conv(stage.core(shallow, current, deep).tensor), 0.1)
        np.testing.assert_array_equal(out.tensor.data, manual.data)

    def test_all_eight_presence_combinations_keep_width(self):
        rng = np.random.default_rng(42)
        for has_shallow in (False, True):
            for has_deep in (False, True):
                for has_skip in (False, True):
                    stage = FusionStage("s", 5, has_shallow, has_deep, has_skip,
                                        rng, dtype=np.float64)
                    out = stage(fmap(2, 5, side=16) if has_shallow else None,
                                fmap(3, 5, side=8),
                                fmap(4, 5, side=4) if has_deep else None,
                                fmap(4, 5, side=4, seed=9) if has_skip else None)
                    assert out.shape == (1, 5, 8, 8)
                    assert out.level == 3

    def test_residual_pass_through_is_exact(self):
        stage = FusionStage("s", 4, True, True, True,
                            np.random.default_rng(42), dtype=np.float64)
        stage.core.fuse.weight.data = np.zeros_like(stage.core.fuse.weight.data)
        stage.core.fuse.bias.data = np.zeros_like(stage.core.fuse.bias.data)
        identity_pointwise(stage.skip_proj)
        identity_conv3x3(stage.conv)
        skip = fmap(4, 4, side=4, nonneg=True)
        out = stage(fmap(2, 4, side=16), fmap(3, 4, side=8), fmap(4, 4, side=4), skip)
        expected = eng.upsample2x(skip.tensor).data
        assert np.max(np.abs(out.tensor.data - expected)) == 0.0

    def test_skip_level_arithmetic_enforced(self):
        stage = FusionStage("s", 4, False, False, True,
                            np.random.default_rng(0), dtype=np.float64)
        with pytest.raises(ShapeError):
            stage(None, fmap(3, 4, side=8), None, fmap(5, 4, side=8))

    def test_full_stage_gradient_20_probes(self):
        stage = FusionStage("s", 3, True, True, True,
                            np.random.default_rng(42), dtype=np.float64)
        shallow, current = fmap(2, 3, side=8), fmap(3, 3, side=4)
        deep, skip = fmap(4, 3, side=2), fmap(4, 3, side=2, seed=5)

        def model():
            out = stage(shallow, current, deep, skip)
            return eng.sum_all(eng.mul(out.tensor, out.tensor))

        report = finite_diff_check(model, stage.params(), n_probes=20)
        assert report.passed, report.summary()


class TestBiFusionPath:
    def cfg(self, **kw):
        base = dict(num_levels=5, num_maps=3, fuse_channels=3, head_channels=4)
        base.update(kw)
        return PyramidConfig(**base)

    def backbone_maps(self, cfg, side=32, dtype=np.float64, seed=3):
        maps = []
        for level in range(1, cfg.num_levels + 1):
            maps.append(fmap(level, cfg.fuse_channels, side // 2 ** (level - 1),
                             seed=seed, dtype=dtype))
        return maps

    def test_output_levels_follow_span(self):
        cfg = self.cfg()
        path = BiFusionPath("path1", 1, cfg, np.random.default_rng(42), np.float64)
        outs = path.forward(self.backbone_maps(cfg))
        assert [o.level for o in outs] == [5, 4, 3]

    def test_output_shapes(self):
        cfg = self.cfg(use_residual=True)
        path = BiFusionPath("path2", 2, cfg, np.random.default_rng(42), np.float64)
        outs = path.forward(self.backbone_maps(cfg))
        assert [o.level for o in outs] == [4, 3, 2]
        assert [o.shape for o in outs] == [(1, 3, 4, 4), (1, 3, 8, 8), (1, 3, 16, 16)]

    def test_non_residual_matches_manual_core_composition(self):
        cfg = self.cfg()
        path = BiFusionPath("path1", 1, cfg, np.random.default_rng(42), np.float64)
        maps = self.backbone_maps(cfg)
        outs = path.forward(maps)
        manual = []
        for stage, level in zip(path.stages, path.span):
            shallow = maps[level - 2] if level - 1 >= 1 else None
            deep = maps[level] if level + 1 <= cfg.num_levels else None
            fused = stage.core(shallow, maps[level - 1], deep)
            manual.append(eng.leaky_relu(stage.conv(fused.tensor), 0.1))
        for out, m in zip(outs, manual):
            np.testing.assert_array_equal(out.tensor.data, m.data)

    def test_residual_stages_consume_previous_output(self):
        cfg = self.cfg(use_residual=True)
        path = BiFusionPath("path1", 1, cfg, np.random.default_rng(42), np.float64)
        assert [s.has_skip for s in path.stages] == [False, True, True]
        maps = self.backbone_maps(cfg)
        outs = path.forward(maps)
        # recompute stage 2 manually from stage 1's output
        level = path.span[1]
        manual = path.stages[1](maps[level - 2], maps[level - 1], maps[level], outs[0])
        np.testing.assert_array_equal(outs[1].tensor.data, manual.tensor.data)

    def test_missing_levels_rejected(self):
        cfg = self.cfg()
        path = BiFusionPath("path1", 1, cfg, np.random.default_rng(42), np.float64)
        with pytest.raises(ConfigError):
            path.forward(self.backbone_maps(cfg)[:-1])


class TestIntegrateMaps:
    def test_single_map_passes_through_fuser(self):
        rng = np.random.default_rng(42)
        cfg = PyramidConfig(num_levels=3, num_maps=1, fuse_channels=2, head_channels=4)
        from minifpn.layers import PointwiseLayer
        integ = PointwiseLayer("integrate1", 2, 4, rng, dtype=np.float64)
        single = fmap(3, 2, side=4)
        (out,) = integrate_maps([integ], [[single]], cfg.num_levels)
        np.testing.assert_array_equal(
            out.tensor.data, eng.leaky_relu(integ(single.tensor), 0.1).data)
        assert out.level == 3

    def test_prediction_map_sides(self):
        cfg = PyramidConfig(num_levels=5, num_maps=3, fuse_channels=2, head_channels=4,
                            use_parallel=True, use_residual=True)
        model = PyramidModel(cfg, seed=1)
        maps = model.forward(Tensor(np.random.default_rng(0)
                                    .normal(size=(1, 3, 64, 64)).astype(np.float32)))
        assert [m.shape[2] for m in maps] == [4, 8, 16]
        assert [m.level for m in maps] == [5, 4, 3]
        assert all(m.shape[1] == 4 for m in maps)

    def test_permutation_equivariance_bitwise(self):
        from minifpn.layers import PointwiseLayer
        rng = np.random.default_rng(42)
        c_fuse, num_paths = 3, 3
        outputs = []
        for n in range(num_paths):
            outputs.append([
                FeatureMap(Tensor(rng.integers(-4, 5, size=(1, c_fuse, 4, 4))
                                  .astype(np.float64)), 3)])
        integ = PointwiseLayer("integrate1", c_fuse * num_paths, 2, rng,
                               dtype=np.float64)
        integ.weight.data = rng.integers(-3, 4, size=integ.weight.shape).astype(np.float64)
        integ.bias.data = rng.integers(-3, 4, size=integ.bias.shape).astype(np.float64)
        (base,) = integrate_maps([integ], outputs, num_levels=3)

        perm = [2, 0, 1]
        permuted_outputs = [outputs[p] for p in perm]
        repermuted = PointwiseLayer("integrate1", c_fuse * num_paths, 2,
                                    np.random.default_rng(0), dtype=np.float64)
        w = np.empty_like(integ.weight.data)
        for j, p in enumerate(perm):
            w[:, j * c_fuse:(j + 1) * c_fuse] = integ.weight.data[:, p * c_fuse:(p + 1) * c_fuse]
        repermuted.weight.data = w
        repermuted.bias.data = integ.bias.data.copy()
        (swapped,) = integrate_maps([repermuted], permuted_outputs, num_levels=3)
        assert base.tensor.data.tobytes() == swapped.tensor.data.tobytes()


class TestBottomUpFusion:
    def cfg(self, num_maps=3):
        return PyramidConfig(num_levels=2 * num_maps - 1 if num_maps > 1 else 1,
                             num_maps=num_maps, fuse_channels=2, head_channels=3,
                             use_bfm=True)

    def prediction_maps(self, cfg, dtype=np.float64):
        return [fmap(level, cfg.head_channels, 32 // 2 ** (level - 1), dtype=dtype)
                for level in cfg.prediction_levels()]

    def test_single_map_is_identity(self):
        cfg = self.cfg(num_maps=1)
        bfm = BottomUpFusion("bfm", cfg, np.random.default_rng(42), np.float64)
        maps = self.prediction_maps(cfg)
        out = bfm(maps)
        assert out[0] is maps[0]

    def test_shapes_preserved(self):
        cfg = self.cfg()
        bfm = BottomUpFusion("bfm", cfg, np.random.default_rng(42), np.float64)
        maps = self.prediction_maps(cfg)
        out = bfm(maps)
        assert [m.shape for m in out] == [m.shape for m in maps]
        assert [m.level for m in out] == [m.level for m in maps]

    def test_finest_map_untouched(self):
        cfg = self.cfg()
        bfm = BottomUpFusion("bfm", cfg, np.random.default_rng(42), np.float64)
        maps = self.prediction_maps(cfg)
        out = bfm(maps)
        assert out[-1] is maps[-1]

    def test_wrong_levels_rejected(self):
        cfg = self.cfg()
        bfm = BottomUpFusion("bfm", cfg, np.random.default_rng(42), np.float64)
        with pytest.raises(ShapeError):
            bfm(list(reversed(self.prediction_maps(cfg))))

    def test_chain_gradient_20_probes(self):
        cfg = self.cfg()
        bfm = BottomUpFusion("bfm", cfg, np.random.default_rng(42), np.float64)
        maps = self.prediction_maps(cfg)

        def model():
            out = bfm(maps)
            total = eng.sum_all(eng.mul(out[0].tensor, out[0].tensor))
            for m in out[1:]:
                total = total + eng.sum_all(eng.mul(m.tensor, m.tensor))
            return total

        report = finite_diff_check(model, bfm.params(), n_probes=20)
        assert report.passed, report.summary()


def expected_param_count(cfg: PyramidConfig) -> int:
    """Closed-form parameter count derived independently from the layer shapes."""
    c, ch, levels, maps = (cfg.fuse_channels, cfg.head_channels, cfg.num_levels,
                           cfg.num_maps)
    total = (3 * c * 9 + c) + (levels - 1) * (c * c * 9 + c)
    for path in range(1, cfg.num_paths + 1):
        span = layer_span(path, levels, maps)
        for s, level in enumerate(span, start=1):
            present = 1 + int(level > 1) + int(level < levels)
            if level > 1:
                total += 4 * c * c + c          # re-org fuse
            total += 2 * present * c            # channel scale
            total += present * c * c + c        # core fuse
            if cfg.use_residual and s >= 2:
                total += c * c + c              # skip projection
            total += c * c * 9 + c              # conv module
    total += maps * (cfg.num_paths * c * ch + ch)
    if cfg.use_bfm:
        total += (maps - 1) * ((ch * ch * 9 + ch) + (2 * ch * ch + ch))
    return total


class TestPyramidModel:
    def test_shape_contract_example(self):
        cfg = PyramidConfig(num_levels=5, num_maps=3, fuse_channels=16,
                            head_channels=32, use_residual=True, use_parallel=True,
                            use_bfm=True)
        model = PyramidModel(cfg, seed=0)
        maps = model.forward(Tensor(np.random.default_rng(1)
                                    .normal(size=(1, 3, 64, 64)).astype(np.float32)))
        assert [m.shape for m in maps] == [(1, 32, 4, 4), (1, 32, 8, 8), (1, 32, 16, 16)]

    def test_baseline_uses_single_path(self):
        cfg = PyramidConfig(num_levels=5, num_maps=3, fuse_channels=4, head_channels=4)
        model = PyramidModel(cfg, seed=0)
        assert len(model.paths) == 1
        assert model.paths[0].span == [5, 4, 3]
        assert model.bfm is None

    @pytest.mark.parametrize("use_residual", [False, True])
    @pytest.mark.parametrize("use_parallel", [False, True])
    @pytest.mark.parametrize("use_bfm", [False, True])
    def test_param_count_closed_form(self, use_residual, use_parallel, use_bfm):
        cfg = PyramidConfig(num_levels=5, num_maps=3, fuse_channels=4, head_channels=6,
                            use_residual=use_residual, use_parallel=use_parallel,
                            use_bfm=use_bfm)
        model = PyramidModel(cfg, seed=0)
        assert sum(p.data.size for p in model.params()) == expected_param_count(cfg)

    def test_param_names_unique(self):
        cfg = PyramidConfig(num_levels=5, num_maps=3, fuse_channels=4, head_channels=6,
                            use_residual=True, use_parallel=True, use_bfm=True)
        names = [p.name for p in PyramidModel(cfg, seed=0).params()]
        assert len(names) == len(set(names))

    def test_same_seed_same_init(self):
        cfg = PyramidConfig(num_levels=5, num_maps=3, fuse_channels=4, head_channels=6,
                            use_residual=True, use_parallel=True)
        a = PyramidModel(cfg, seed=7)
        b = PyramidModel(cfg, seed=7)
        for pa, pb in zip(a.params(), b.params()):
            assert pa.name == pb.name
            assert pa.data.tobytes() == pb.data.tobytes()

    def test_toggles_off_equals_manual_composition(self):
        cfg = PyramidConfig(num_levels=5, num_maps=3, fuse_channels=3, head_channels=4)
        model = PyramidModel(cfg, seed=0, dtype=np.float64)
        image = Tensor(np.random.default_rng(2).normal(size=(1, 3, 32, 32)))
        got = model.forward(image)

        maps = model.backbone(image)
        path = model.paths[0]
        manual_outs = []
        for stage, level in zip(path.stages, path.span):
            shallow = maps[level - 2] if level - 1 >= 1 else None
            deep = maps[level] if level + 1 <= cfg.num_levels else None
            fused = stage.core(shallow, maps[level - 1], deep)
            manual_outs.append(
                FeatureMap(eng.leaky_relu(stage.conv(fused.tensor), 0.1), level))
        for s, out in enumerate(manual_outs):
            projected = eng.leaky_relu(
                model.integrators[s](eng.concat_channels([out.tensor])), 0.1)
            np.testing.assert_array_equal(got[s].tensor.data, projected.data)

    def test_model_gradient_small_config(self):
        cfg = PyramidConfig(num_levels=3, num_maps=2, fuse_channels=2, head_channels=2,
                            use_residual=True, use_parallel=True, use_bfm=True)
        model = PyramidModel(cfg, seed=0, dtype=np.float64)
        image = Tensor(np.random.default_rng(3).normal(size=(1, 3, 8, 8)))

        def model_fn():
            out = model.forward(image)
            total = eng.sum_all(eng.mul(out[0].tensor, out[0].tensor))
            for m in out[1:]:
                total = total + eng.sum_all(eng.mul(m.tensor, m.tensor))
            return total

        report = finite_diff_check(model_fn, model.params(), n_probes=20)
        assert report.passed, report.summary()


class TestResampleToLevel:
    def test_downsample_path(self):
        fm = fmap(3, 2, side=8)
        out = resample_to_level(fm, 5)
        assert out.level == 5 and out.shape == (1, 2, 2, 2)

    def test_upsample_path(self):
        fm = fmap(3, 2, side=8)
        out = resample_to_level(fm, 1)
        assert out.level == 1 and out.shape == (1, 2, 32, 32)

    def test_same_level_is_identity(self):
        fm = fmap(3, 2, side=8)
        out = resample_to_level(fm, 3)
        np.testing.assert_array_equal(out.tensor.data, fm.tensor.data)


class TestExportTopology:
    def build(self, **kw):
        base = dict(num_levels=5, num_maps=3, fuse_channels=2, head_channels=2)
        base.update(kw)
        return PyramidModel(PyramidConfig(**base), seed=0)

    def test_residual_model_has_two_skip_edges_per_path(self):
        text = export_topology(self.build(use_residual=True, use_parallel=True))
        skip_edges = [ln for ln in text.splitlines() if "kind=skip" in ln]
        assert len(skip_edges) == 3 * 2
        for path in (1, 2, 3):
            assert sum(f"path{path}." in ln for ln in skip_edges) == 2

    def test_non_residual_has_no_skip_edges(self):
        text = export_topology(self.build(num_maps=1, num_levels=3))
        assert "kind=skip" not in text

    def test_graph_is_acyclic(self):
        text = export_topology(self.build(use_residual=True, use_parallel=True,
                                          use_bfm=True))
        nodes, edges = parse_dot(text)
        assert len(nodes) == len(set(nodes))
        for a, b in edges:
            assert a in nodes and b in nodes
        assert kahn_sort(nodes, edges) is not None

    def test_node_count_matches_block_count(self):
        model = self.build(use_residual=True, use_parallel=True, use_bfm=True)
        nodes, _ = parse_dot(export_topology(model))
        cfg = model.config
        expected = (cfg.num_levels + cfg.num_paths * cfg.num_maps + cfg.num_maps
                    + (cfg.num_maps - 1))
        assert len(nodes) == expected

    def test_one_statement_per_line_and_stable(self):
        model_a = self.build(use_residual=True)
        model_b = self.build(use_residual=True)
        text = export_topology(model_a)
        assert text == export_topology(model_b)
        body = text.splitlines()[1:-1]
        for line in body:
            assert line.endswith(";")
            is_edge = '" -> "' in line
            is_node = not is_edge and '" [' in line
            assert is_edge or is_node
