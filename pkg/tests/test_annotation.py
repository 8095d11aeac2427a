import json
from pathlib import Path

import pytest
from fastapi.testclient import TestClient

from kg2mmkg.annotation import AnnotationStore, CRITERIA, create_app
from kg2mmkg.backends import BackendEndpoint, build_backend

ENTITIES = ["ent_alpha", "ent_beta", "ent_gamma", "ent_delta"]
METHOD_IDS = ["m0", "m1", "m2", "m3"]


def make_manifest(root: Path, tag: str, entities, neighbors=True) -> Path:
    """Fabricate a pipeline-shaped manifest with real mock PNGs."""
    t2i = build_backend(BackendEndpoint(kind="mock-t2i", mock_seed=hash(tag) % 1000))
    (root / "images").mkdir(parents=True, exist_ok=True)
    lines = [json.dumps({"type": "header", "config_hash": tag, "tool_version": "t", "strategy": tag, "seed": 0})]
    for idx, entity in enumerate(entities):
        art = t2i.generate(f"{tag} {entity}", seed=0, size=(24, 24))
        rel_path = f"images/{idx:03d}.png"
        (root / rel_path).write_bytes(art.data)
        record = {
            "entity": entity,
            "display": entity.replace("_", " ").title(),
            "neighbors": (
                [{"relation": "starredIn", "tail": f"film_{idx}", "sim": 0.5}] if neighbors else []
            ),
            "prompt": f"A photo of {entity}",
            "prompt_source": "template",
            "instruction_sha256": "0" * 64,
            "image": rel_path,
            "image_sha256": art.sha256,
            "width": 24,
            "height": 24,
            "backend": {"kind": "mock-t2i", "url": None},
            "seed": 0,
        }
        lines.append(json.dumps(record, sort_keys=True))
    path = root / "manifest.jsonl"
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return path


@pytest.fixture
def service(tmp_path):
    manifests = {
        mid: make_manifest(tmp_path / mid, mid, ENTITIES, neighbors=(mid == "m0"))
        for mid in METHOD_IDS
    }
    app = create_app(tmp_path / "store")
    client = TestClient(app)
    return client, manifests, tmp_path


def create_session(client, manifests, sample_size=2, seed=0, methods=METHOD_IDS):
    body = {
        "dataset_tag": "fixture",
        "sample_size": sample_size,
        "seed": seed,
        "methods": [{"id": mid, "manifest": str(manifests[mid])} for mid in methods],
    }
    resp = client.post("/sessions", json=body)
    assert resp.status_code == 200, resp.text
    return resp.json()


class TestSessionCreation:
    def test_four_slots_per_item(self, service):
        client, manifests, _ = service
        info = create_session(client, manifests, sample_size=2)
        assert info["n_items"] == 2
        items = client.get(
            f"/sessions/{info['session_id']}/items", params={"annotator": "a1"}
        ).json()["items"]
        assert all(len(item["slots"]) == 4 for item in items)

    def test_sample_size_zero_empty_session(self, service):
        client, manifests, _ = service
        info = create_session(client, manifests, sample_size=0)
        assert info["n_items"] == 0

    def test_same_seed_same_sample_and_shuffles(self, service):
        client, manifests, _ = service
        a = create_session(client, manifests, sample_size=3, seed=11)
        b = create_session(client, manifests, sample_size=3, seed=11)
        view_a = client.get(f"/sessions/{a['session_id']}/items", params={"annotator": "x"}).json()
        view_b = client.get(f"/sessions/{b['session_id']}/items", params={"annotator": "x"}).json()
        ents_a = [i["entity_display"] for i in view_a["items"]]
        ents_b = [i["entity_display"] for i in view_b["items"]]
        assert ents_a == ents_b

    def test_missing_image_excludes_entity(self, service, tmp_path):
        client, manifests, root = service
        short = make_manifest(root / "short", "short", ENTITIES[:2])
        body = {
            "dataset_tag": "fixture",
            "sample_size": 10,
            "seed": 0,
            "methods": [
                {"id": "m0", "manifest": str(manifests["m0"])},
                {"id": "mshort", "manifest": str(short)},
            ],
        }
        resp = client.post("/sessions", json=body)
        assert resp.json()["n_items"] == 2  # only the two covered entities

    def test_reals_directory_source(self, service, tmp_path):
        client, manifests, root = service
        t2i = build_backend(BackendEndpoint(kind="mock-t2i", mock_seed=5))
        reals = root / "reals"
        for entity in ENTITIES:
            d = reals / entity
            d.mkdir(parents=True)
            (d / "0.png").write_bytes(t2i.generate(f"real {entity}", 0, (24, 24)).data)
        body = {
            "dataset_tag": "with-reals",
            "sample_size": 2,
            "seed": 3,
            "methods": [
                {"id": "m0", "manifest": str(manifests["m0"])},
                {"id": "m1", "manifest": str(manifests["m1"])},
                {"id": "m2", "manifest": str(manifests["m2"])},
                {"id": "mr", "images_dir": str(reals)},
            ],
        }
        resp = client.post("/sessions", json=body)
        assert resp.status_code == 200
        sid = resp.json()["session_id"]
        items = client.get(f"/sessions/{sid}/items", params={"annotator": "a"}).json()["items"]
        assert all(len(i["slots"]) == 4 for i in items)

    def test_method_needs_exactly_one_source(self, service):
        client, manifests, _ = service
        body = {
            "dataset_tag": "x", "sample_size": 1, "seed": 0,
            "methods": [{"id": "m0"}, {"id": "m1", "manifest": str(manifests["m1"])}],
        }
        assert client.post("/sessions", json=body).status_code == 422


class TestBlinding:
    def test_no_method_ids_in_annotator_payloads(self, service):
        client, manifests, _ = service
        info = create_session(client, manifests, sample_size=3)
        sid = info["session_id"]
        payloads = [
            client.get(f"/sessions/{sid}/items", params={"annotator": "a1"}).text,
            client.get(f"/sessions/{sid}/progress", params={"annotator": "a1"}).text,
            client.get("/sessions").text,
        ]
        items = client.get(f"/sessions/{sid}/items", params={"annotator": "a1"}).json()["items"]
        for item in items:
            payloads.append(client.get(f"/items/{item['item_id']}", params={"annotator": "a1"}).text)
        for text in payloads:
            for mid in METHOD_IDS:
                assert f'"{mid}"' not in text
            for name in ("vsns", "name-only", "longest-token", "manifest", "image_path"):
                assert name not in text

    def test_shuffle_deterministic_per_annotator(self, service):
        client, manifests, _ = service
        sid = create_session(client, manifests, sample_size=2, seed=4)["session_id"]

        def slots(annotator):
            view = client.get(f"/sessions/{sid}/items", params={"annotator": annotator}).json()
            return [item["slots"] for item in view["items"]]

        assert slots("alice") == slots("alice")
        others = [slots(f"annotator{i}") for i in range(6)]
        assert any(o != slots("alice") for o in others)

    def test_slot_sets_agree_across_annotators(self, service):
        client, manifests, _ = service
        sid = create_session(client, manifests, sample_size=2)["session_id"]
        a = client.get(f"/sessions/{sid}/items", params={"annotator": "a"}).json()["items"]
        b = client.get(f"/sessions/{sid}/items", params={"annotator": "b"}).json()["items"]
        for item_a, item_b in zip(a, b):
            assert sorted(item_a["slots"]) == sorted(item_b["slots"])


class TestImages:
    def test_slot_image_bytes(self, service):
        client, manifests, _ = service
        sid = create_session(client, manifests, sample_size=1)["session_id"]
        item = client.get(f"/sessions/{sid}/items", params={"annotator": "a"}).json()["items"][0]
        for slot_id in item["slots"]:
            resp = client.get(item["image_urls"][slot_id])
            assert resp.status_code == 200
            assert resp.content[:8] == b"\x89PNG\r\n\x1a\n"

    def test_unknown_slot_404(self, service):
        client, manifests, _ = service
        sid = create_session(client, manifests, sample_size=1)["session_id"]
        item = client.get(f"/sessions/{sid}/items", params={"annotator": "a"}).json()["items"][0]
        assert client.get(f"/items/{item['item_id']}/slots/ffffffffffff/image").status_code == 404


def submit(client, sid, annotator, item, criterion, ranking):
    return client.post("/ratings", json={
        "session_id": sid,
        "annotator_id": annotator,
        "item_id": item["item_id"],
        "criterion": criterion,
        "ranking": ranking,
    })


class TestRatings:
    def get_items(self, client, sid, annotator="a1"):
        return client.get(f"/sessions/{sid}/items", params={"annotator": annotator}).json()["items"]

    def test_valid_rating_accepted(self, service):
        client, manifests, _ = service
        sid = create_session(client, manifests, sample_size=1)["session_id"]
        item = self.get_items(client, sid)[0]
        ranking = {slot: rank for rank, slot in enumerate(item["slots"], start=1)}
        assert submit(client, sid, "a1", item, "IQ", ranking).status_code == 200

    def test_non_permutation_rejected(self, service):
        client, manifests, _ = service
        sid = create_session(client, manifests, sample_size=1)["session_id"]
        item = self.get_items(client, sid)[0]
        ranking = {slot: 1 for slot in item["slots"]}  # all rank 1
        assert submit(client, sid, "a1", item, "IQ", ranking).status_code == 422

    def test_wrong_slot_set_rejected(self, service):
        client, manifests, _ = service
        sid = create_session(client, manifests, sample_size=1)["session_id"]
        item = self.get_items(client, sid)[0]
        ranking = {slot: rank for rank, slot in enumerate(item["slots"][:-1], start=1)}
        assert submit(client, sid, "a1", item, "IQ", ranking).status_code == 422

    def test_unknown_item_404(self, service):
        client, manifests, _ = service
        sid = create_session(client, manifests, sample_size=1)["session_id"]
        resp = client.post("/ratings", json={
            "session_id": sid, "annotator_id": "a", "item_id": "nope",
            "criterion": "IQ", "ranking": {},
        })
        assert resp.status_code == 404

    def test_bad_criterion_422(self, service):
        client, manifests, _ = service
        sid = create_session(client, manifests, sample_size=1)["session_id"]
        item = self.get_items(client, sid)[0]
        ranking = {slot: rank for rank, slot in enumerate(item["slots"], start=1)}
        assert submit(client, sid, "a1", item, "XX", ranking).status_code == 422

    def test_resubmission_overwrites(self, service):
        client, manifests, _ = service
        sid = create_session(client, manifests, sample_size=1)["session_id"]
        item = self.get_items(client, sid)[0]
        slots = item["slots"]
        first = {slot: rank for rank, slot in enumerate(slots, start=1)}
        second = {slot: len(slots) + 1 - rank for slot, rank in first.items()}
        submit(client, sid, "a1", item, "IQ", first)
        submit(client, sid, "a1", item, "IQ", second)
        results = client.get(f"/sessions/{sid}/results").json()
        assert results["n_ratings"] == 1  # upsert, not append


class TestAggregation:
    def rank_by_method(self, client, sid, item, order):
        """ranking dict assigning rank per method id using server-side store."""
        return order

    def test_unanimous_top_method(self, service, tmp_path):
        client, manifests, _ = service
        sid = create_session(client, manifests, sample_size=2)["session_id"]
        store: AnnotationStore = client.app.state.store
        session = store.sessions[sid]
        for annotator in ("a1", "a2", "a3"):
            for item in session.items:
                by_method = {slot.method_id: slot.slot_id for slot in item.slots}
                # m0 best (rank 4), then m1, m2, m3
                ranking = {
                    by_method["m0"]: 4, by_method["m1"]: 3,
                    by_method["m2"]: 2, by_method["m3"]: 1,
                }
                for criterion in CRITERIA:
                    assert submit(client, sid, annotator, {"item_id": item.item_id}, criterion, ranking).status_code == 200
        results = client.get(f"/sessions/{sid}/results").json()
        for criterion in CRITERIA:
            assert results["criteria"][criterion]["m0"] == 4.0
            assert results["criteria"][criterion]["m3"] == 1.0

    def test_hand_computed_two_annotator_fixture(self, service):
        client, manifests, _ = service
        sid = create_session(client, manifests, sample_size=2)["session_id"]
        store: AnnotationStore = client.app.state.store
        session = store.sessions[sid]
        items = session.items
        # annotator a1: item0 m0=4,m1=3,m2=2,m3=1; item1 m0=1,m1=2,m2=3,m3=4
        # annotator a2: item0 m0=2,m1=4,m2=1,m3=3; item1 m0=3,m1=1,m2=4,m3=2
        plan = {
            ("a1", 0): {"m0": 4, "m1": 3, "m2": 2, "m3": 1},
            ("a1", 1): {"m0": 1, "m1": 2, "m2": 3, "m3": 4},
            ("a2", 0): {"m0": 2, "m1": 4, "m2": 1, "m3": 3},
            ("a2", 1): {"m0": 3, "m1": 1, "m2": 4, "m3": 2},
        }
        for (annotator, idx), by_method in plan.items():
            item = items[idx]
            slot_of = {slot.method_id: slot.slot_id for slot in item.slots}
            ranking = {slot_of[m]: r for m, r in by_method.items()}
            submit(client, sid, annotator, {"item_id": item.item_id}, "CIE", ranking)
        results = client.get(f"/sessions/{sid}/results").json()
        # hand means over 4 ratings: m0 (4+1+2+3)/4=2.5, m1 (3+2+4+1)/4=2.5,
        # m2 (2+3+1+4)/4=2.5, m3 (1+4+3+2)/4=2.5
        for m in METHOD_IDS:
            assert results["criteria"]["CIE"][m] == pytest.approx(2.5, abs=1e-12)
        assert results["criteria"]["IQ"] == {}

    def test_submission_order_invariance(self, service, tmp_path):
        client, manifests, root = service
        results = []
        for order_seed, store_name in ((0, "s1"), (1, "s2")):
            app = create_app(root / store_name)
            local = TestClient(app)
            sid = create_session(local, manifests, sample_size=2, seed=9)["session_id"]
            store = app.state.store
            session = store.sessions[sid]
            submissions = []
            for annotator in ("a1", "a2"):
                for item in session.items:
                    slot_of = {slot.method_id: slot.slot_id for slot in item.slots}
                    ranking = {slot_of[m]: r for m, r in zip(METHOD_IDS, (4, 3, 2, 1))}
                    submissions.append((annotator, item.item_id, "IQ", ranking))
            if order_seed:
                submissions.reverse()
            for annotator, item_id, criterion, ranking in submissions:
                local.post("/ratings", json={
                    "session_id": sid, "annotator_id": annotator, "item_id": item_id,
                    "criterion": criterion, "ranking": ranking,
                })
            results.append(local.get(f"/sessions/{sid}/results").json()["criteria"])
        assert results[0] == results[1]


class TestPersistence:
    def test_restart_replays_event_log(self, service, tmp_path):
        client, manifests, root = service
        sid = create_session(client, manifests, sample_size=2)["session_id"]
        store: AnnotationStore = client.app.state.store
        session = store.sessions[sid]
        item = session.items[0]
        ranking = {slot.slot_id: rank for rank, slot in enumerate(item.slots, start=1)}
        submit(client, sid, "a1", {"item_id": item.item_id}, "IQ", ranking)
        before = client.get(f"/sessions/{sid}/results").json()

        reborn = TestClient(create_app(root / "store"))
        after = reborn.get(f"/sessions/{sid}/results").json()
        assert after == before
        progress = reborn.get(f"/sessions/{sid}/progress", params={"annotator": "a1"}).json()
        assert progress["done"] == 1


class TestStaticMount:
    def test_frontend_served_when_present(self, tmp_path):
        frontend = Path(__file__).resolve().parents[1] / "frontend"
        if not (frontend / "dist" / "app.js").exists():
            pytest.skip("frontend bundle not built")
        client = TestClient(create_app(tmp_path / "store", frontend_dir=frontend))
        page = client.get("/ui/")
        assert page.status_code == 200
        assert "<main id=\"app\">" in page.text
        bundle = client.get("/ui/dist/app.js")
        assert bundle.status_code == 200
        assert "RankingState" in bundle.text


class TestProgress:
    def test_fresh_session_zero(self, service):
        client, manifests, _ = service
        sid = create_session(client, manifests, sample_size=2)["session_id"]
        progress = client.get(f"/sessions/{sid}/progress", params={"annotator": "a1"}).json()
        assert progress["done"] == 0
        assert progress["total"] == 6

    def test_counts_by_criterion(self, service):
        client, manifests, _ = service
        sid = create_session(client, manifests, sample_size=2)["session_id"]
        item = client.get(f"/sessions/{sid}/items", params={"annotator": "a1"}).json()["items"][0]
        ranking = {slot: rank for rank, slot in enumerate(item["slots"], start=1)}
        submit(client, sid, "a1", item, "IQ", ranking)
        progress = client.get(f"/sessions/{sid}/progress", params={"annotator": "a1"}).json()
        assert progress["per_criterion"]["IQ"]["done"] == 1
        assert progress["per_criterion"]["CIE"]["done"] == 0
