"""Network description: pool sizing, builders, accounting, rewiring.

The per-layer dimension tables below are the independent oracle: conv
rows are (out, in, kh, kw, out_h, out_w), written down from the layer
arithmetic by hand.  Parameter and MAC counts are recomputed from those
rows inside the tests and compared against the module's counters.
"""

import numpy as np
import pytest

from acdforge import graph as G
from acdforge.errors import SpecError

FULL_FILTERS = [8, 64, 32, 64, 64, 128, 128, 256, 256, 512, 512, 50]
SMALL_FILTERS = [7, 20, 10, 14, 22, 31, 35, 41, 51, 67, 69, 48]

FULL_CONV_ROWS = [
    (8, 1, 1, 9, 1, 15109),
    (64, 8, 1, 5, 1, 7553),
    (32, 1, 3, 3, 64, 151),
    (64, 32, 3, 3, 32, 75),
    (64, 64, 3, 3, 32, 75),
    (128, 64, 3, 3, 16, 37),
    (128, 128, 3, 3, 16, 37),
    (256, 128, 3, 3, 8, 18),
    (256, 256, 3, 3, 8, 18),
    (512, 256, 3, 3, 4, 9),
    (512, 512, 3, 3, 4, 9),
    (50, 512, 1, 1, 2, 4),
]

SMALL_CONV_ROWS = [
    (7, 1, 1, 9, 1, 15109),
    (20, 7, 1, 5, 1, 7553),
    (10, 1, 3, 3, 20, 151),
    (14, 10, 3, 3, 10, 75),
    (22, 14, 3, 3, 10, 75),
    (31, 22, 3, 3, 5, 37),
    (35, 31, 3, 3, 5, 37),
    (41, 35, 3, 3, 2, 18),
    (51, 41, 3, 3, 2, 18),
    (67, 51, 3, 3, 1, 9),
    (69, 67, 3, 3, 1, 9),
    (48, 69, 1, 1, 1, 4),
]


def params_oracle(conv_rows, dense_in, dense_out):
    total = 0
    for (o, i, kh, kw, _, _) in conv_rows:
        total += o * i * kh * kw + o   # conv weights + bias
        total += 2 * o                 # batchnorm scale + shift
    return total + dense_in * dense_out + dense_out


def macs_oracle(conv_rows, dense_in, dense_out):
    total = 0
    for (o, i, kh, kw, h, w) in conv_rows:
        total += o * i * kh * kw * h * w
    return total + dense_in * dense_out


class TestPoolSizing:
    def test_front_end_pool_for_reference_rates(self):
        # 30225 samples at 20 kHz: conv widths 15109 -> 7553, 151.125
        # frames of 10 ms, kernel rounds up from 49.98
        assert G.sfeb_pool_size(30225, 20000, 7553) == 50

    def test_front_end_pool_matches_brute_force_search(self):
        i_len, sr = 66150, 44100
        w = (i_len - 9) // 2 + 1
        w = (w - 5) // 2 + 1
        frames = (i_len / sr) * 100.0
        best = min(range(1, w + 1), key=lambda p: (abs(w / p - frames), p))
        assert G.sfeb_pool_size(i_len, sr, w) == best == 110

    def test_front_end_pool_floor_of_one(self):
        # width already below the frame count
        assert G.sfeb_pool_size(8000, 8000, 40) == 1

    def test_body_pools_full(self):
        assert G.tfeb_pool_sizes(64, 151, 6) == [(2, 2)] * 5 + [(2, 4)]

    def test_body_pools_small_height(self):
        assert G.tfeb_pool_sizes(20, 151, 6) == [
            (2, 2), (2, 2), (2, 2), (2, 2), (1, 2), (1, 4)]

    def test_body_pools_axis_of_one(self):
        ks = G.tfeb_pool_sizes(1, 32, 6)
        assert all(kh == 1 for kh, _ in ks)
        assert ks[-1] == (1, 1)

    def test_body_pool_chain_collapses_sampled_grid(self):
        # the exhaustive sweep lives in the acceptance suite; spot-check
        # a deterministic grid here
        for h0 in [1, 2, 3, 5, 17, 63, 64, 127, 256]:
            for w0 in [1, 2, 9, 100, 151, 733, 1024]:
                h, w = h0, w0
                for kh, kw in G.tfeb_pool_sizes(h0, w0, 6):
                    h //= kh
                    w //= kw
                assert (h, w) == (1, 1), (h0, w0)


class TestBuilders:
    def test_default_ladder(self):
        spec = G.build_acdnet(30225, 20000, 50, 8)
        assert [l.filters for l in spec.conv_layers()] == FULL_FILTERS
        assert G.count_filters(spec) == 2074

    def test_full_conv_rows_and_counts(self):
        spec = G.build_acdnet(30225, 20000, 50, 8)
        shapes = dict(G.propagate_shapes(spec))
        rows = []
        for l in spec.conv_layers():
            c, h, w = shapes[l.name]
            rows.append((l.filters, l.in_channels, *l.kernel, h, w))
        assert rows == FULL_CONV_ROWS
        assert G.count_params(spec) == params_oracle(FULL_CONV_ROWS, 50, 50)
        assert G.count_params(spec) == 4737452
        assert G.count_flops(spec) == macs_oracle(FULL_CONV_ROWS, 50, 50)
        assert G.count_flops(spec) == 541869356

    def test_small_variant_conv_rows_and_counts(self):
        spec = G.build_acdnet_custom(30225, 20000, 50, SMALL_FILTERS)
        shapes = dict(G.propagate_shapes(spec))
        rows = []
        for l in spec.conv_layers():
            c, h, w = shapes[l.name]
            rows.append((l.filters, l.in_channels, *l.kernel, h, w))
        assert rows == SMALL_CONV_ROWS
        assert G.count_filters(spec) == 415
        assert G.count_params(spec) == params_oracle(SMALL_CONV_ROWS, 48, 50)
        assert G.count_params(spec) == 131889
        assert G.count_flops(spec) == macs_oracle(SMALL_CONV_ROWS, 48, 50)
        assert G.count_flops(spec) == 14286134

    def test_small_variant_pool_kernels(self):
        spec = G.build_acdnet_custom(30225, 20000, 50, SMALL_FILTERS)
        pools = {l.name: l.kernel for l in spec.layers
                 if l.kind in (G.MAXPOOL, G.AVGPOOL)}
        assert pools == {"maxpool1": (1, 50), "maxpool2": (2, 2),
                         "maxpool3": (2, 2), "maxpool4": (2, 2),
                         "maxpool5": (2, 2), "maxpool6": (1, 2),
                         "avgpool1": (1, 4)}

    def test_dense_head_of_small_variant(self):
        spec = G.build_acdnet_custom(30225, 20000, 50, SMALL_FILTERS)
        d = spec.layer("dense1")
        assert (d.in_dim, d.out_dim) == (48, 50)
        assert d.in_dim * d.out_dim + d.out_dim == 2450

    def test_toy_build_shapes(self):
        spec = G.build_acdnet(2000, 2000, 4, 2)
        shapes = dict(G.propagate_shapes(spec))
        assert shapes["conv1"] == (2, 1, 996)
        assert shapes["conv2"] == (16, 1, 496)
        assert spec.layer("maxpool1").kernel == (1, 5)
        assert shapes["maxpool1"] == (16, 1, 99)
        assert shapes["swap1"] == (1, 16, 99)
        assert shapes["softmax1"] == (4, 1, 1)

    def test_propagation_reports_offending_layer(self):
        spec = G.build_acdnet(2000, 2000, 4, 2)
        spec.layer("conv4").in_channels = 9
        with pytest.raises(SpecError, match="conv4"):
            G.propagate_shapes(spec)

    def test_filter_list_length_checked(self):
        with pytest.raises(SpecError):
            G.build_acdnet_custom(2000, 2000, 4, [1, 2, 3])

    def test_input_too_short(self):
        with pytest.raises(SpecError):
            G.build_acdnet(10, 2000, 4, 2)


class TestRewire:
    def test_mid_body_removal_shifts_next_conv(self):
        spec = G.build_acdnet(30225, 20000, 50, 8)
        before = G.count_params(spec)
        new = G.rewire_after_channel_removal(spec, "conv11", 3)
        assert new.layer("conv11").filters == 511
        assert new.layer("bn11").filters == 511
        assert new.layer("conv12").in_channels == 511
        # own row: in=512 channels by 3x3 kernel = 4608 weights + 1 bias
        # + 2 batchnorm, plus 50 weights of the next conv's input slice
        assert before - G.count_params(new) == 512 * 9 + 1 + 2 + 50

    def test_head_conv_removal_shrinks_dense(self):
        spec = G.build_acdnet(30225, 20000, 50, 8)
        before = G.count_params(spec)
        new = G.rewire_after_channel_removal(spec, "conv12", 0)
        assert new.layer("conv12").filters == 49
        assert new.layer("dense1").in_dim == 49
        assert before - G.count_params(new) == (512 + 1 + 2) + 50

    def test_front_end_removal_recomputes_body_pools(self):
        spec = G.build_acdnet_custom(30225, 20000, 50, SMALL_FILTERS)
        new = G.rewire_after_channel_removal(spec, "conv2", 7)
        assert new.layer("conv2").filters == 19
        assert dict(G.propagate_shapes(new))["swap1"] == (1, 19, 151)
        # conv3 still consumes a single-channel map
        assert new.layer("conv3").in_channels == 1
        # 19 -> 9 -> 4 -> 2 -> 1 under the halving schedule
        pools = [l.kernel for l in new.layers if l.kind == G.MAXPOOL]
        assert pools == [(1, 50), (2, 2), (2, 2), (2, 2), (2, 2), (1, 2)]

    def test_counts_strictly_decrease(self):
        spec = G.build_acdnet(2000, 2000, 4, 2)
        for name in ["conv1", "conv2", "conv3", "conv7", "conv12"]:
            new = G.rewire_after_channel_removal(spec, name, 0)
            assert G.count_params(new) < G.count_params(spec)
            assert G.count_flops(new) < G.count_flops(spec)
            assert G.count_filters(new) == G.count_filters(spec) - 1

    def test_height_collapse_drops_identity_pools(self):
        spec = G.build_acdnet(2000, 2000, 4, 2)
        # squeeze the front end from 16 filters down to 2
        for _ in range(14):
            spec = G.rewire_after_channel_removal(spec, "conv2", 0)
        assert spec.layer("conv2").filters == 2
        shapes = dict(G.propagate_shapes(spec))
        assert shapes["swap1"][1] == 2
        for l in spec.layers:
            if l.kind in (G.MAXPOOL, G.AVGPOOL):
                assert l.kernel != (1, 1)
        assert shapes["flatten1"][0] == spec.layer("dense1").in_dim

    def test_cannot_remove_last_filter(self):
        spec = G.build_acdnet(2000, 2000, 4, 2)
        spec2 = spec
        with pytest.raises(SpecError):
            for _ in range(2):
                spec2 = G.rewire_after_channel_removal(spec2, "conv1", 0)

    def test_rewire_rejects_non_conv(self):
        spec = G.build_acdnet(2000, 2000, 4, 2)
        with pytest.raises(SpecError):
            G.rewire_after_channel_removal(spec, "maxpool1", 0)


class TestTextForm:
    def test_round_trip_identity(self):
        spec = G.build_acdnet_custom(30225, 20000, 50, SMALL_FILTERS)
        text = G.spec_to_text(spec)
        back = G.spec_from_text(text)
        assert G.spec_to_text(back) == text
        assert back == spec

    def test_round_trip_toy(self):
        spec = G.build_acdnet(2000, 2000, 4, 2)
        assert G.spec_from_text(G.spec_to_text(spec)) == spec

    def test_rejects_bad_version(self):
        spec = G.build_acdnet(2000, 2000, 4, 2)
        text = G.spec_to_text(spec).replace("v1", "v9", 1)
        with pytest.raises(SpecError):
            G.spec_from_text(text)

    def test_rejects_mangled_line(self):
        spec = G.build_acdnet(2000, 2000, 4, 2)
        text = G.spec_to_text(spec).replace("kernel=1x9", "kernel=banana")
        with pytest.raises(SpecError):
            G.spec_from_text(text)

    def test_rejects_unknown_kind(self):
        with pytest.raises(SpecError):
            G.spec_from_text("v1\nnet i_len=1 sr=1 n_cls=1 base_width=1\n"
                             "warp name=w1\n")
