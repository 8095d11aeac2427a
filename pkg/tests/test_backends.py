import numpy as np
import pytest

from kg2mmkg.backends import (
    BackendEndpoint,
    BackendError,
    BackendProtocolError,
    ImageArtifact,
    build_backend,
)
from wire import MockSidecar


def mock_ep(kind, **kw):
    return BackendEndpoint(kind=f"mock-{kind}", **kw)


class TestEndpointValidation:
    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            BackendEndpoint(kind="oracle")

    def test_http_requires_url(self):
        with pytest.raises(ValueError):
            BackendEndpoint(kind="t2i")

    def test_bad_limits(self):
        with pytest.raises(ValueError):
            BackendEndpoint(kind="mock-t2i", timeout=0)
        with pytest.raises(ValueError):
            BackendEndpoint(kind="mock-t2i", max_in_flight=0)


class TestMockTextToImage:
    def test_deterministic(self):
        t2i = build_backend(mock_ep("t2i", mock_seed=7))
        a = t2i.generate("a red fox", seed=3, size=(64, 64))
        b = t2i.generate("a red fox", seed=3, size=(64, 64))
        assert a.sha256 == b.sha256
        assert a.data == b.data

    def test_size_honored(self):
        t2i = build_backend(mock_ep("t2i"))
        art = t2i.generate("anything", seed=0, size=(512, 512))
        assert (art.width, art.height) == (512, 512)

    def test_prompt_avalanche(self):
        t2i = build_backend(mock_ep("t2i"))
        seen = set()
        for i in range(1000):
            base = f"prompt number {i}"
            h1 = t2i.generate(base, seed=0, size=(8, 8)).sha256
            h2 = t2i.generate(base + "!", seed=0, size=(8, 8)).sha256
            assert h1 != h2
            seen.update((h1, h2))
        assert len(seen) == 2000

    def test_empty_prompt_rejected(self):
        with pytest.raises(ValueError):
            build_backend(mock_ep("t2i")).generate("", seed=0)

    def test_artifact_is_real_png(self):
        art = build_backend(mock_ep("t2i")).generate("x", seed=1, size=(16, 16))
        assert art.data[:8] == b"\x89PNG\r\n\x1a\n"
        # round-trips through the artifact constructor (decodable, hash stable)
        again = ImageArtifact.from_png(art.data, seed=1, prompt="x")
        assert again.sha256 == art.sha256


class TestMockReward:
    def test_rate_one_all_positive(self):
        reward = build_backend(mock_ep("reward", positive_rate=1.0))
        art = build_backend(mock_ep("t2i")).generate("x", 0, (8, 8))
        assert all(reward.score(f"text {i}", art) > 0 for i in range(200))

    def test_rate_zero_all_negative(self):
        reward = build_backend(mock_ep("reward", positive_rate=0.0))
        art = build_backend(mock_ep("t2i")).generate("x", 0, (8, 8))
        assert all(reward.score(f"text {i}", art) < 0 for i in range(200))

    def test_rate_half_binomial_bound(self):
        reward = build_backend(mock_ep("reward", positive_rate=0.5))
        art = build_backend(mock_ep("t2i")).generate("x", 0, (8, 8))
        positives = sum(reward.score(f"text {i}", art) > 0 for i in range(10000))
        assert abs(positives / 10000 - 0.5) < 0.02

    def test_score_depends_on_text_not_image(self):
        reward = build_backend(mock_ep("reward"))
        t2i = build_backend(mock_ep("t2i"))
        a = t2i.generate("one", 0, (8, 8))
        b = t2i.generate("two", 0, (8, 8))
        assert reward.score("same text", a) == reward.score("same text", b)


class TestMockEmbedder:
    def test_unit_norm(self):
        emb = build_backend(mock_ep("embed"))
        art = build_backend(mock_ep("t2i")).generate("x", 0, (8, 8))
        assert abs(np.linalg.norm(emb.embed_image(art)) - 1.0) < 1e-6
        assert abs(np.linalg.norm(emb.embed_text("hello")) - 1.0) < 1e-6

    def test_identical_bytes_identical_vector(self):
        emb = build_backend(mock_ep("embed"))
        t2i = build_backend(mock_ep("t2i"))
        a = t2i.generate("x", 0, (8, 8))
        b = t2i.generate("x", 0, (8, 8))
        assert np.array_equal(emb.embed_image(a), emb.embed_image(b))

    def test_self_cosine_is_one(self):
        emb = build_backend(mock_ep("embed"))
        art = build_backend(mock_ep("t2i")).generate("x", 0, (8, 8))
        v = emb.embed_image(art)
        assert float(v @ v) == pytest.approx(1.0, abs=1e-9)

    def test_dim_configurable(self):
        emb = build_backend(mock_ep("embed", embed_dim=16))
        assert emb.embed_text("x").shape == (16,)


class TestMockLlm:
    def test_echo_contains_subject(self):
        llm = build_backend(mock_ep("llm"))
        reply = llm.complete('Describe "Julian Glover" in one sentence.')
        assert "Julian Glover" in reply

    def test_facts_included(self):
        llm = build_backend(mock_ep("llm"))
        reply = llm.complete('Describe "X".\n- starred in Y\n- born in Z\n')
        assert "starred in Y" in reply and "born in Z" in reply


@pytest.fixture
def sidecar():
    sc = MockSidecar(mock_seed=0, positive_rate=0.5)
    url = sc.start()
    yield sc, url
    sc.stop()


def http_ep(kind, url, **kw):
    kw.setdefault("retry_backoff", 0.01)
    kw.setdefault("timeout", 5.0)
    return BackendEndpoint(kind=kind, base_url=url, **kw)


class TestHttpClients:
    def test_t2i_parity_with_mock(self, sidecar):
        sc, url = sidecar
        http = build_backend(http_ep("t2i", url))
        direct = sc.t2i.generate("a fox", 5, (32, 32))
        via_wire = http.generate("a fox", 5, (32, 32))
        assert via_wire.sha256 == direct.sha256

    def test_reward_and_embed_parity(self, sidecar):
        sc, url = sidecar
        art = sc.t2i.generate("a fox", 5, (16, 16))
        assert build_backend(http_ep("reward", url)).score("a fox", art) == pytest.approx(
            sc.reward.score("a fox", art)
        )
        v_wire = build_backend(http_ep("embed", url)).embed_image(art)
        assert np.allclose(v_wire, sc.embedder.embed_image(art), atol=1e-12)

    def test_llm_parity(self, sidecar):
        sc, url = sidecar
        out = build_backend(http_ep("llm", url)).complete('Describe "Q".')
        assert out == sc.llm.complete('Describe "Q".')

    def test_retry_then_success(self, sidecar):
        sc, url = sidecar
        client = build_backend(http_ep("llm", url, max_retries=2))
        sc.fail_next(2)
        sc.request_count = 0
        assert "Q" in client.complete('Describe "Q".')
        assert sc.request_count == 3

    def test_retry_budget_exhausted(self, sidecar):
        sc, url = sidecar
        client = build_backend(http_ep("llm", url, max_retries=2))
        sc.fail_next(10)
        sc.request_count = 0
        with pytest.raises(BackendError):
            client.complete("x")
        assert sc.request_count == 3  # 1 + max_retries, never more

    def test_4xx_not_retried(self, sidecar):
        sc, url = sidecar
        client = build_backend(http_ep("reward", url))
        sc.request_count = 0
        bad = ImageArtifact(b"not a png", 1, 1, "0", 0, "0")
        with pytest.raises(BackendError):
            client.score("t", bad)
        assert sc.request_count == 1

    def test_garbage_payload_is_protocol_error(self, sidecar):
        sc, url = sidecar
        client = build_backend(http_ep("llm", url))
        sc.garbage_next(1)
        with pytest.raises(BackendProtocolError):
            client.complete("x")


def test_undecodable_png_rejected():
    with pytest.raises(BackendProtocolError):
        ImageArtifact.from_png(b"junk bytes", seed=0, prompt="p")
