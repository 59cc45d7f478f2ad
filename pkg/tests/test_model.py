"""Architecture assembly, initialization, receptive fields, parameter counts."""

import numpy as np
import pytest

from oracles import count_instantiated, receptive_field_support
from pixelfill.model import (
    DOCUMENTED_CONVENTION,
    REFERENCE_DISCRIMINATOR_PARAMS,
    REFERENCE_GENERATOR_PARAMS,
    REFERENCE_RECEPTIVE_FIELDS,
    CountingConvention,
    DiscriminatorConfig,
    GeneratorConfig,
    build_discriminator,
    build_generator,
    composite,
    count_parameters,
    default_dilation_schedule,
    discriminator_forward,
    encoder_dilations,
    enumerate_conventions,
    generator_backward,
    generator_forward,
    identity_init,
    named_buffers,
    named_parameters,
    receptive_field,
    set_parameter,
    xavier_init,
)
from pixelfill.tensor_ops import ConvSpec, conv2d_forward, same_padding


class TestConfigs:
    def test_default_dilation_schedule_doubles(self):
        assert default_dilation_schedule(4) == (2, 4, 8, 16)
        assert default_dilation_schedule(5) == (2, 4, 8, 16, 32)

    def test_generator_defaults(self):
        cfg = GeneratorConfig()
        assert cfg.base_filters == 128
        assert cfg.dilation_schedule == (2, 4, 8, 16)
        assert cfg.encoder_depth == 6
        assert cfg.downsample_factor == 4
        assert encoder_dilations(cfg) == [1, 1, 2, 4, 8, 16]

    def test_decoder_must_mirror_encoder(self):
        with pytest.raises(ValueError):
            GeneratorConfig(downsample_layers=2, decoder_layers=2)

    def test_discriminator_schedule_validated(self):
        with pytest.raises(ValueError):
            DiscriminatorConfig(channel_schedule=(64, 100, 256, 512, 1))
        with pytest.raises(ValueError):
            DiscriminatorConfig(channel_schedule=(64, 128, 256, 512, 2))


class TestInitializers:
    @pytest.mark.parametrize("dilation", [1, 2, 4, 8, 16])
    def test_identity_init_passes_input_bit_exactly(self, dilation, rng):
        """A freshly initialized dilated layer is the identity map (pre-BN)."""
        channels = 6
        spec = ConvSpec(
            channels, channels, kernel=3, stride=1, dilation=dilation,
            padding=same_padding(3, dilation),
        )
        w = identity_init(np.empty(spec.weight_shape(), dtype=np.float32), dilation)
        x = rng.standard_normal((2, channels, 20, 20)).astype(np.float32)
        out = conv2d_forward(x, w, spec)
        assert out.tobytes() == x.tobytes()

    def test_identity_init_requires_square_channels(self):
        with pytest.raises(ValueError):
            identity_init(np.empty((3, 4, 3, 3), dtype=np.float32))

    def test_xavier_bound_and_spread(self):
        w = xavier_init(np.empty((16, 8, 3, 3), dtype=np.float32), rng=3)
        bound = np.sqrt(6.0 / (8 * 9 + 16 * 9))
        assert float(np.abs(w).max()) <= bound
        assert float(np.abs(w).max()) > 0.5 * bound  # actually fills the range
        assert abs(float(w.mean())) < 0.1 * bound

    def test_build_deterministic_under_seed(self):
        cfg = GeneratorConfig(base_filters=8)
        a = build_generator(cfg, seed=5)
        b = build_generator(cfg, seed=5)
        c = build_generator(cfg, seed=6)
        for (n1, p1), (_, p2) in zip(
            named_parameters(a).items(), named_parameters(b).items()
        ):
            assert p1.tobytes() == p2.tobytes(), n1
        assert any(
            p1.tobytes() != p3.tobytes()
            for p1, p3 in zip(
                named_parameters(a).values(), named_parameters(c).values()
            )
        )


class TestReceptiveField:
    def test_reference_table_reproduced(self):
        cfg = GeneratorConfig()
        fields = tuple(receptive_field(d, cfg) for d in range(1, 7))
        assert fields == REFERENCE_RECEPTIVE_FIELDS == (3, 7, 23, 55, 119, 247)

    @pytest.mark.parametrize("n_dilated", [2, 3, 4, 5])
    def test_matches_tap_enumeration_oracle(self, n_dilated):
        cfg = GeneratorConfig(n_dilated=n_dilated)
        kernels = [(3, 2, 1)] * cfg.downsample_layers + [
            (3, 1, d) for d in cfg.dilation_schedule
        ]
        for depth in range(1, cfg.encoder_depth + 1):
            params = [(k, s, d) for (k, s, d) in kernels[:depth]]
            assert receptive_field(depth, cfg) == receptive_field_support(params)

    def test_depth_seven_with_five_dilated_layers(self):
        cfg = GeneratorConfig(n_dilated=5)
        assert receptive_field(7, cfg) == 503

    def test_depth_out_of_range(self):
        with pytest.raises(ValueError):
            receptive_field(7, GeneratorConfig())
        with pytest.raises(ValueError):
            receptive_field(0, GeneratorConfig())


class TestParameterCounts:
    def test_generator_reference_exact(self):
        gen = build_generator(GeneratorConfig(), seed=0)
        assert count_parameters(gen, DOCUMENTED_CONVENTION) == (
            REFERENCE_GENERATOR_PARAMS
        )

    def test_documented_convention_matches_instantiated_arrays(self):
        """The convention arithmetic must agree with the actual trainable
        arrays the builder creates (no conv biases, BN affine pairs)."""
        gen = build_generator(GeneratorConfig(), seed=0)
        assert count_instantiated(named_parameters(gen)) == (
            REFERENCE_GENERATOR_PARAMS
        )

    def test_exactly_one_convention_matches(self):
        gen = build_generator(GeneratorConfig(), seed=0)
        counts = enumerate_conventions(gen)
        assert len(counts) == 8
        matches = [c for c, n in counts.items() if n == REFERENCE_GENERATOR_PARAMS]
        assert matches == [DOCUMENTED_CONVENTION]

    def test_discriminator_within_tolerance(self):
        disc = build_discriminator(DiscriminatorConfig(), seed=0)
        with_bias = count_parameters(disc, CountingConvention(True, False, False))
        assert with_bias == count_instantiated(named_parameters(disc))
        delta = abs(with_bias - REFERENCE_DISCRIMINATOR_PARAMS)
        assert delta / REFERENCE_DISCRIMINATOR_PARAMS <= 0.002
        weights_only = count_parameters(disc, CountingConvention(False, False, False))
        assert weights_only == 1_554_624
        assert with_bias == 1_555_585


class TestGeneratorForward:
    def test_spatial_trajectory_and_output_shape(self, rng):
        cfg = GeneratorConfig(base_filters=8)
        gen = build_generator(cfg, seed=0)
        x = rng.standard_normal((2, 3, 64, 64)).astype(np.float32)
        y, caches = generator_forward(gen, x, mode="train", want_cache=True)
        assert y.shape == (2, 3, 64, 64)
        spatial = [c.pre_bn.shape[-1] for c in caches]
        assert spatial == [32, 16, 16, 16, 16, 16, 16, 32, 64]

    def test_eval_before_training_rejected(self, rng):
        gen = build_generator(GeneratorConfig(base_filters=8), seed=0)
        x = rng.standard_normal((1, 3, 16, 16)).astype(np.float32)
        with pytest.raises(ValueError, match="running-statistics"):
            generator_forward(gen, x, mode="eval")

    def test_backward_covers_every_parameter(self, rng):
        cfg = GeneratorConfig(base_filters=4)
        gen = build_generator(cfg, seed=0)
        x = rng.standard_normal((2, 3, 16, 16)).astype(np.float32)
        y, caches = generator_forward(gen, x, mode="train", want_cache=True)
        grads = generator_backward(gen, caches, np.ones_like(y))
        assert set(grads) == set(named_parameters(gen))

    def test_output_dtype_stays_float32(self, rng):
        gen = build_generator(GeneratorConfig(base_filters=4), seed=0)
        x = rng.standard_normal((1, 3, 16, 16)).astype(np.float32)
        y, _ = generator_forward(gen, x, mode="train")
        assert y.dtype == np.float32


class TestDiscriminatorForward:
    def test_patch_map_shape_on_full_resolution(self, rng):
        disc = build_discriminator(DiscriminatorConfig(), seed=0)
        x = rng.standard_normal((1, 3, 256, 256)).astype(np.float32)
        logits, _ = discriminator_forward(disc, x)
        assert logits.shape == (1, 1, 16, 16)

    def test_small_input_map(self, rng):
        cfg = DiscriminatorConfig(channel_schedule=(4, 8, 16, 32, 1))
        disc = build_discriminator(cfg, seed=0)
        x = rng.standard_normal((2, 3, 64, 64)).astype(np.float32)
        logits, _ = discriminator_forward(disc, x)
        assert logits.shape == (2, 1, 4, 4)


class TestComposite:
    def test_context_pixels_bit_exact(self, rng):
        y = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        mask = np.zeros((2, 1, 8, 8), dtype=np.float32)
        mask[:, :, 2:6, 2:6] = 1.0
        comp = composite(y, x, mask)
        outside = np.broadcast_to(mask, comp.shape) == 0
        assert comp[outside].tobytes() == x[outside].tobytes()
        inside = ~outside
        assert comp[inside].tobytes() == y[inside].tobytes()

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            composite(
                np.zeros((1, 3, 8, 8)), np.zeros((1, 3, 8, 8)),
                np.zeros((1, 1, 4, 4)),
            )


class TestParameterAccess:
    def test_set_parameter_roundtrip(self):
        gen = build_generator(GeneratorConfig(base_filters=4), seed=0)
        new = np.full_like(named_parameters(gen)["enc1/weight"], 0.5)
        set_parameter(gen, "enc1/weight", new)
        assert named_parameters(gen)["enc1/weight"] is new

    def test_unknown_parameter_rejected(self):
        gen = build_generator(GeneratorConfig(base_filters=4), seed=0)
        with pytest.raises(KeyError):
            set_parameter(gen, "enc9/weight", np.zeros(1))

    def test_buffers_cover_batchnorm_layers(self):
        gen = build_generator(GeneratorConfig(base_filters=4), seed=0)
        buffers = named_buffers(gen)
        bn_layers = [l.name for l in gen.layers if l.bn is not None]
        assert len(bn_layers) == 8
        assert set(buffers) == {
            f"{name}/{kind}"
            for name in bn_layers
            for kind in ("running_mean", "running_var", "batches_seen")
        }
