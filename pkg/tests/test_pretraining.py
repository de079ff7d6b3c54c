import math

import numpy as np
import pytest
import torch

from scenediff.codecs import CodecConfig, train_codec
from scenediff.data import ToyConfig, Triplet, mask_to_onehot, render_toy_scene, video_params
from scenediff.pretraining import (
    ContrastiveBatch,
    GlobalPretrainConfig,
    GlobalProjection,
    LatentTokenDecoder,
    LocalPretrainConfig,
    PretrainDivergenceError,
    PretrainError,
    draw_contrastive_sample,
    global_loss,
    group_distance_ratio,
    local_loss,
    mask_random_class_region,
    precompute_mask_latents,
    pretrain_global,
    pretrain_local,
    retrieval_accuracy,
)
from scenediff.sg_core import SegmentationMask, extract_scene_graph, serialize_graph

from oracles import finite_difference_tensor_gradient, relative_gradient_error


def make_mask(labels, class_count):
    return SegmentationMask(np.asarray(labels, dtype=np.int64), class_count)


class TestMasking:
    def test_single_maskable_class_always_selected(self):
        labels = np.zeros((8, 8), dtype=np.int64)
        labels[2:5, 3:6] = 2
        image = np.random.default_rng(0).random((8, 8, 3)).astype(np.float32)
        for seed in range(5):
            sample = mask_random_class_region(
                image, make_mask(labels, 3), np.random.default_rng(seed), excluded_classes={0}
            )
            assert sample.target_class == 2
            assert sample.bbox == (3, 2, 6, 5)
            region = sample.masked_image[2:5, 3:6]
            assert (region == 0.5).all()
            assert np.array_equal(sample.full_image, image)

    def test_full_frame_class_yields_uniform_fill(self):
        labels = np.ones((6, 6), dtype=np.int64)
        image = np.random.default_rng(1).random((6, 6, 3)).astype(np.float32)
        sample = mask_random_class_region(image, make_mask(labels, 2), np.random.default_rng(0))
        assert (sample.masked_image == 0.5).all()

    def test_no_maskable_class_signals_skip(self):
        labels = np.zeros((4, 4), dtype=np.int64)
        image = np.zeros((4, 4, 3), dtype=np.float32)
        assert (
            mask_random_class_region(
                image, make_mask(labels, 2), np.random.default_rng(0), excluded_classes={0}
            )
            is None
        )

    def test_seed_fixed_selection_reproducible(self):
        rng = np.random.default_rng(3)
        labels = rng.integers(0, 4, size=(12, 12))
        image = rng.random((12, 12, 3)).astype(np.float32)
        picks_a = [
            mask_random_class_region(image, make_mask(labels, 4), np.random.default_rng(s)).target_class
            for s in range(10)
        ]
        picks_b = [
            mask_random_class_region(image, make_mask(labels, 4), np.random.default_rng(s)).target_class
            for s in range(10)
        ]
        assert picks_a == picks_b
        assert len(set(picks_a)) > 1  # uniform choice actually varies


class _IdentityDecoder(torch.nn.Module):
    """Test stub: ignores the embedding and returns a fixed output."""

    def __init__(self, output):
        super().__init__()
        self.output = output

    def forward(self, z_r, z_g):
        return self.output


class TestLocalLoss:
    def test_perfect_decoder_gives_zero(self):
        z = torch.randn(2, 3, 4, 4, dtype=torch.float64)
        loss = local_loss(z, torch.rand_like(z), torch.zeros(2, 8), _IdentityDecoder(z))
        assert abs(float(loss)) <= 1e-9

    def test_uniform_offset_gives_epsilon_squared(self):
        z = torch.randn(1, 2, 3, 3, dtype=torch.float64)
        eps = 0.37
        loss = local_loss(
            z, torch.rand_like(z), torch.zeros(1, 8), _IdentityDecoder(z + eps)
        )
        assert abs(float(loss) - eps**2) <= 1e-9

    def test_shape_mismatch_rejected(self):
        with pytest.raises(PretrainError):
            local_loss(
                torch.zeros(1, 2, 4, 4),
                torch.zeros(1, 2, 2, 2),
                torch.zeros(1, 8),
                _IdentityDecoder(torch.zeros(1, 2, 4, 4)),
            )

    def test_gradient_wrt_embedding_matches_finite_differences(self):
        torch.manual_seed(0)
        decoder = LatentTokenDecoder(
            latent_channels=2, latent_size=2, embed_dim=6, width=16, blocks=1, heads=2
        ).double()
        z_x = torch.randn(1, 2, 2, 2, dtype=torch.float64)
        z_r = torch.randn(1, 2, 2, 2, dtype=torch.float64)
        z_g = torch.randn(1, 6, dtype=torch.float64, requires_grad=True)

        def loss_fn():
            return local_loss(z_x, z_r, z_g, decoder)

        (grad,) = torch.autograd.grad(loss_fn(), z_g)
        fd = finite_difference_tensor_gradient(loss_fn, z_g, h=1e-6)
        assert relative_gradient_error([grad], [fd]) <= 1e-3


class TestGlobalLoss:
    @pytest.mark.parametrize("k", [1, 3, 7])
    def test_equal_logits_give_ln_k_plus_one(self, k):
        z = torch.full((5,), 0.3, dtype=torch.float64)
        loss = global_loss(z, z.clone(), z.repeat(k, 1))
        assert abs(float(loss) - math.log(k + 1)) <= 1e-9

    def test_dominant_positive_drives_loss_to_zero(self):
        z_g = torch.tensor([30.0], dtype=torch.float64)
        loss = global_loss(z_g, torch.tensor([2.0]), torch.tensor([[-2.0], [-1.0]]))
        assert float(loss) < 1e-9

    def test_known_value_k1(self):
        # logits pos=1, neg=0: -log(e / (e + 1))
        z_g = torch.tensor([1.0], dtype=torch.float64)
        loss = global_loss(z_g, torch.tensor([1.0]), torch.tensor([[0.0]]))
        assert abs(float(loss) - 0.3132616875182228) <= 1e-12

    def test_invariant_under_negative_permutation(self):
        torch.manual_seed(2)
        z_g = torch.randn(6, dtype=torch.float64)
        pos = torch.randn(6, dtype=torch.float64)
        negs = torch.randn(5, 6, dtype=torch.float64)
        perm = torch.randperm(5)
        assert float(global_loss(z_g, pos, negs)) == float(global_loss(z_g, pos, negs[perm]))

    def test_monotонicity_via_directional_perturbation(self):
        z_g = torch.tensor([1.0, 0.0], dtype=torch.float64)
        pos = torch.tensor([0.5, 0.0], dtype=torch.float64)
        negs = torch.tensor([[0.2, 0.0], [0.1, 0.0]], dtype=torch.float64)
        base = float(global_loss(z_g, pos, negs))
        assert float(global_loss(z_g, pos + torch.tensor([0.1, 0.0]), negs)) < base
        for i in range(2):
            bumped = negs.clone()
            bumped[i, 0] += 0.1
            assert float(global_loss(z_g, pos, bumped)) > base

    def test_loss_finite_for_large_logits(self):
        z_g = torch.full((4,), 50.0, dtype=torch.float64)
        pos = torch.full((4,), 40.0, dtype=torch.float64)
        negs = torch.full((3, 4), 45.0, dtype=torch.float64)
        assert math.isfinite(float(global_loss(z_g, pos, negs)))


# --------------------------------------------------------------------------
# training-level tests on a tiny toy world
# --------------------------------------------------------------------------

def build_toy_triplets(n, class_count=5, size=32, seed=11, videos=4):
    config = ToyConfig(image_size=size, class_count=class_count, shapes_per_scene=(1, 2))
    triplets = []
    for i in range(n):
        video_idx = i % videos
        video = video_params(config, video_idx)
        image, labels = render_toy_scene(config, video, np.random.default_rng([seed, i]))
        mask = SegmentationMask(labels, class_count)
        graph = extract_scene_graph(mask, excluded_classes={0})
        triplets.append(
            Triplet(image=image, mask=mask, graph=graph,
                    video_id=f"video_{video_idx:03d}", frame_id=f"frame_{i:04d}")
        )
    return triplets


@pytest.fixture(scope="module")
def toy_world():
    triplets = build_toy_triplets(64)
    images = np.stack([t.image for t in triplets])
    masks = np.stack([mask_to_onehot(t.mask) for t in triplets])
    image_codec, _ = train_codec(
        images,
        CodecConfig(kind="image", in_channels=3, downsample=2, latent_channels=8,
                    codebook_size=64, base_channels=16),
        epochs=10, batch_size=16, seed=0,
    )
    mask_codec, _ = train_codec(
        masks,
        CodecConfig(kind="mask", in_channels=5, downsample=2, latent_channels=8,
                    codebook_size=64, base_channels=16),
        epochs=10, batch_size=16, seed=0, label_loss_weight=0.5,
    )
    return triplets, image_codec, mask_codec


class _SpyCodec:
    """Records the channel counts of every encoded array."""

    def __init__(self, inner):
        self.inner = inner
        self.seen_channels = set()

    @property
    def config(self):
        return self.inner.config

    def encode(self, array):
        self.seen_channels.add(array.shape[-1])
        return self.inner.encode(array)


class TestLocalPretraining:
    def test_overfits_tiny_dataset(self, toy_world):
        triplets, image_codec, _ = toy_world
        config = LocalPretrainConfig(
            epochs=60, batch_size=4, lr=2e-3, seed=0, embed_dim=32, hidden_dim=32,
            gnn_layers=2, decoder_width=64, decoder_blocks=2, decoder_heads=2,
            excluded_classes=(0,),
        )
        _, _, history = pretrain_local(triplets[:4], image_codec, config)
        assert history["train_loss"][-1] < 1e-2

    def test_seed_determinism_of_first_epoch(self, toy_world):
        triplets, image_codec, _ = toy_world
        config = LocalPretrainConfig(
            epochs=1, batch_size=8, seed=3, embed_dim=16, hidden_dim=16,
            gnn_layers=2, decoder_width=32, decoder_blocks=1, decoder_heads=2,
            excluded_classes=(0,),
        )
        _, _, first = pretrain_local(triplets[:16], image_codec, config)
        _, _, second = pretrain_local(triplets[:16], image_codec, config)
        assert first["train_loss"] == second["train_loss"]

    def test_never_touches_mask_latents(self, toy_world):
        triplets, image_codec, _ = toy_world
        spy = _SpyCodec(image_codec)
        config = LocalPretrainConfig(
            epochs=1, batch_size=8, seed=0, embed_dim=16, hidden_dim=16,
            gnn_layers=2, decoder_width=32, decoder_blocks=1, decoder_heads=2,
            excluded_classes=(0,),
        )
        pretrain_local(triplets[:8], image_codec=spy, config=config)
        assert spy.seen_channels == {3}  # RGB only, never one-hot masks

    def test_empty_dataset_rejected(self, toy_world):
        _, image_codec, _ = toy_world
        with pytest.raises(PretrainError):
            pretrain_local([], image_codec, LocalPretrainConfig())

    @pytest.mark.slow
    def test_graph_conditioning_beats_blind_decoder(self, toy_world):
        triplets, image_codec, _ = toy_world
        config = LocalPretrainConfig(
            epochs=30, batch_size=8, lr=1.5e-3, seed=0, embed_dim=32, hidden_dim=48,
            gnn_layers=2, decoder_width=64, decoder_blocks=2, decoder_heads=2,
            excluded_classes=(0,),
        )
        train, val = triplets[:48], triplets[48:]
        _, _, with_graph = pretrain_local(train, image_codec, config, val_triplets=val)
        _, _, blind = pretrain_local(
            train, image_codec, config, val_triplets=val, condition_on_graph=False
        )
        assert with_graph["val_loss"][-1] < blind["val_loss"][-1]


class TestGlobalPretraining:
    def test_contrastive_batch_negatives_differ_from_anchor(self, toy_world):
        triplets, _, mask_codec = toy_world
        latents = precompute_mask_latents(triplets[:16], mask_codec)
        serialized = [serialize_graph(t.graph) for t in triplets[:16]]
        rng = np.random.default_rng(0)
        batch = draw_contrastive_sample(0, triplets[:16], latents, serialized, 5, rng)
        assert len(batch.negative_mask_latents) == 5
        for neg in batch.negative_mask_latents:
            assert not torch.equal(neg, batch.positive_mask_latent)

    def test_contrastive_batch_requires_negatives(self):
        with pytest.raises(PretrainError):
            ContrastiveBatch(
                graph=None, positive_mask_latent=torch.zeros(3), negative_mask_latents=[]
            )

    def test_untrained_retrieval_is_near_chance(self, toy_world):
        triplets, _, mask_codec = toy_world
        torch.manual_seed(0)
        from scenediff.graph_encoder import EncoderConfig, GraphEncoder

        encoder = GraphEncoder(EncoderConfig(feature_dim=9, hidden_dim=16, embed_dim=16))
        latents = precompute_mask_latents(triplets, mask_codec)
        serialized = [serialize_graph(t.graph) for t in triplets]
        projection = GlobalProjection(latents.shape[1], 16)
        k = 7
        acc = retrieval_accuracy(
            encoder, projection, triplets, latents, serialized, k, np.random.default_rng(0)
        )
        # 3-sigma binomial interval around chance = 1/8 with n = 64
        sigma = math.sqrt((1 / 8) * (7 / 8) / len(triplets))
        assert abs(acc - 1 / 8) <= 3 * sigma + 1e-9

    @pytest.mark.slow
    def test_trained_retrieval_beats_chance(self):
        triplets = build_toy_triplets(320, class_count=6, videos=8)
        masks = np.stack([mask_to_onehot(t.mask) for t in triplets])
        mask_codec, _ = train_codec(
            masks[:256],
            CodecConfig(kind="mask", in_channels=6, downsample=2, latent_channels=8,
                        codebook_size=64, base_channels=16),
            epochs=8, batch_size=16, seed=0, label_loss_weight=0.5,
        )
        config = GlobalPretrainConfig(
            epochs=100, batch_size=16, lr=2e-3, seed=0, embed_dim=64, hidden_dim=64,
            gnn_layers=2, negatives=7,
        )
        train, val = triplets[:256], triplets[256:]
        _, _, history = pretrain_global(train, mask_codec, config, val_triplets=val)
        assert history["val_retrieval"][-1] > 0.5
        assert history["val_retrieval"][0] < history["val_retrieval"][-1]

    def test_never_touches_image_latents(self, toy_world):
        triplets, _, mask_codec = toy_world
        spy = _SpyCodec(mask_codec)
        config = GlobalPretrainConfig(
            epochs=1, batch_size=8, seed=0, embed_dim=16, hidden_dim=16, gnn_layers=2,
            negatives=3,
        )
        pretrain_global(triplets[:8], mask_codec=spy, config=config)
        assert spy.seen_channels == {5}  # one-hot masks only, never RGB


class TestGroupDistanceRatio:
    def test_tight_groups_give_small_ratio(self):
        rng = np.random.default_rng(0)
        centers = {0: np.array([0.0, 0.0]), 1: np.array([10.0, 0.0])}
        groups = [0, 0, 0, 1, 1, 1]
        embeddings = np.stack([centers[g] + 0.01 * rng.standard_normal(2) for g in groups])
        assert group_distance_ratio(embeddings, groups) < 0.1

    def test_unstructured_embeddings_give_ratio_near_one(self):
        rng = np.random.default_rng(1)
        embeddings = rng.standard_normal((40, 8))
        groups = [i % 2 for i in range(40)]
        assert 0.9 < group_distance_ratio(embeddings, groups) < 1.1

    def test_requires_both_pair_kinds(self):
        with pytest.raises(PretrainError):
            group_distance_ratio(np.zeros((3, 2)), [0, 0, 0])
