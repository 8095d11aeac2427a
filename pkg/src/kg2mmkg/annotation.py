"""Questionnaire service for blinded human evaluation of entity images.

Sessions are built from per-method manifests (plus an optional directory
of real images).  Methods enter the service only as opaque ids chosen by
the session creator; the slot-to-method mapping lives server-side, slot
order is shuffled per annotator with a seeded RNG, and annotators rank
the slots per criterion.  Ratings land in an append-only event log that
is replayed on startup.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import uuid
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Query
from fastapi.responses import Response
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from .pipeline import read_manifest
from .vns import naturalize

logger = logging.getLogger(__name__)

CRITERIA = ("IQ", "CIE", "CIKG")

CRITERION_PROMPTS = {
    "IQ": (
        "Rank the images by visual quality and authenticity. Deduct for "
        "repeated copies of an object, for characters with missing limbs or "
        "body parts, and most severely for blurring that hides the subject. "
        "Absent such flaws, prefer the clearest and most natural image."
    ),
    "CIE": (
        "Rank the images by how well each one depicts the named entity. "
        "Use the context facts to understand who or what the entity is."
    ),
    "CIKG": (
        "Rank the images by how well each one fits the entity together with "
        "its listed graph neighbors: the best image should match the facts, "
        "not just the name."
    ),
}


def _slug(label: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", label)[:60]


@dataclass(frozen=True)
class SlotDef:
    slot_id: str
    method_id: str
    image_path: str


@dataclass(frozen=True)
class ItemDef:
    item_id: str
    entity: str
    display: str
    context: tuple[str, ...]
    slots: tuple[SlotDef, ...]


@dataclass
class SessionDef:
    session_id: str
    dataset_tag: str
    seed: int
    items: list[ItemDef] = field(default_factory=list)

    def item(self, item_id: str) -> ItemDef:
        for item in self.items:
            if item.item_id == item_id:
                return item
        raise KeyError(item_id)

    def to_payload(self) -> dict:
        return {
            "session_id": self.session_id,
            "dataset_tag": self.dataset_tag,
            "seed": self.seed,
            "items": [
                {**asdict(item), "context": list(item.context),
                 "slots": [asdict(s) for s in item.slots]}
                for item in self.items
            ],
        }

    @classmethod
    def from_payload(cls, payload: dict) -> "SessionDef":
        items = [
            ItemDef(
                item_id=i["item_id"],
                entity=i["entity"],
                display=i["display"],
                context=tuple(i["context"]),
                slots=tuple(SlotDef(**s) for s in i["slots"]),
            )
            for i in payload["items"]
        ]
        return cls(payload["session_id"], payload["dataset_tag"], payload["seed"], items)


class MethodSpec(BaseModel):
    id: str
    manifest: str | None = None
    images_dir: str | None = None


class SessionRequest(BaseModel):
    dataset_tag: str = "default"
    sample_size: int
    seed: int = 0
    methods: list[MethodSpec]


class RatingRequest(BaseModel):
    session_id: str
    annotator_id: str
    item_id: str
    criterion: str
    ranking: dict[str, int]


def _method_images(spec: MethodSpec) -> dict[str, tuple[str, list[str]]]:
    """entity -> (image path, context facts) for one method source."""
    out: dict[str, tuple[str, list[str]]] = {}
    if spec.manifest:
        base = Path(spec.manifest).parent
        for record in read_manifest(spec.manifest)[1:]:
            facts = [
                f"{naturalize(n['relation'])} {n['tail']}" for n in record.get("neighbors", [])
            ]
            out[record["entity"]] = (str(base / record["image"]), facts)
    elif spec.images_dir:
        root = Path(spec.images_dir)
        for sub in sorted(p for p in root.iterdir() if p.is_dir()):
            images = sorted(sub.glob("*.png"))
            if images:
                out[sub.name] = (str(images[0]), [])
    return out


def _shuffle_for(seed: int, annotator: str, item_id: str, n: int) -> list[int]:
    digest = hashlib.sha256(f"{seed}|{annotator}|{item_id}".encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "big"))
    return list(rng.permutation(n))


class AnnotationStore:
    """In-memory projection over an append-only JSONL event log."""

    def __init__(self, store_dir):
        self.store_dir = Path(store_dir)
        self.store_dir.mkdir(parents=True, exist_ok=True)
        self.log_path = self.store_dir / "events.jsonl"
        self.sessions: dict[str, SessionDef] = {}
        self.ratings: dict[tuple[str, str, str, str], dict[str, int]] = {}
        self._replay()

    def _replay(self) -> None:
        if not self.log_path.exists():
            return
        for line in self.log_path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            event = json.loads(line)
            if event["type"] == "session":
                session = SessionDef.from_payload(event["session"])
                self.sessions[session.session_id] = session
            elif event["type"] == "rating":
                key = (event["session_id"], event["annotator_id"], event["item_id"], event["criterion"])
                self.ratings[key] = event["ranking"]

    def _append(self, event: dict) -> None:
        with open(self.log_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(event, sort_keys=True) + "\n")
            fh.flush()

    def create_session(self, request: SessionRequest) -> SessionDef:
        if not request.methods:
            raise ValueError("at least one method source is required")
        seen_ids = set()
        for spec in request.methods:
            if spec.id in seen_ids:
                raise ValueError(f"duplicate method id {spec.id!r}")
            seen_ids.add(spec.id)
            if bool(spec.manifest) == bool(spec.images_dir):
                raise ValueError(f"method {spec.id!r} needs exactly one of manifest/images_dir")

        sources = {spec.id: _method_images(spec) for spec in request.methods}
        eligible = sorted(set.intersection(*(set(v) for v in sources.values())))
        excluded = set.union(*(set(v) for v in sources.values())) - set(eligible)
        if excluded:
            logger.warning(
                "%d entities excluded: missing an image for at least one method", len(excluded)
            )
        rng = np.random.default_rng(request.seed)
        if len(eligible) > request.sample_size:
            picked_idx = sorted(rng.choice(len(eligible), size=request.sample_size, replace=False))
            picked = [eligible[i] for i in picked_idx]
        else:
            picked = eligible

        session_id = uuid.uuid4().hex[:12]
        items = []
        for k, entity in enumerate(picked):
            item_id = f"{session_id}-i{k}"
            context: list[str] = []
            slots = []
            for spec in request.methods:
                image_path, facts = sources[spec.id][entity]
                if facts and not context:
                    context = facts
                slot_id = hashlib.sha256(
                    f"{session_id}|{item_id}|{spec.id}".encode()
                ).hexdigest()[:12]
                slots.append(SlotDef(slot_id=slot_id, method_id=spec.id, image_path=image_path))
            display = entity
            if request.methods[0].manifest:
                records = {r["entity"]: r for r in read_manifest(request.methods[0].manifest)[1:]}
                display = records[entity].get("display", entity)
            items.append(
                ItemDef(
                    item_id=item_id, entity=entity, display=display,
                    context=tuple(context), slots=tuple(slots),
                )
            )
        session = SessionDef(
            session_id=session_id, dataset_tag=request.dataset_tag, seed=request.seed, items=items
        )
        self.sessions[session_id] = session
        self._append({"type": "session", "session": session.to_payload()})
        return session

    def find_item(self, item_id: str) -> tuple[SessionDef, ItemDef]:
        for session in self.sessions.values():
            try:
                return session, session.item(item_id)
            except KeyError:
                continue
        raise KeyError(item_id)

    def submit(self, request: RatingRequest) -> None:
        session = self.sessions.get(request.session_id)
        if session is None:
            raise KeyError(f"unknown session {request.session_id!r}")
        item = session.item(request.item_id)  # KeyError -> 404
        if request.criterion not in CRITERIA:
            raise ValueError(f"criterion must be one of {CRITERIA}")
        slot_ids = {slot.slot_id for slot in item.slots}
        k = len(slot_ids)
        if set(request.ranking) != slot_ids:
            raise ValueError("ranking must cover exactly the item's slots")
        if sorted(request.ranking.values()) != list(range(1, k + 1)):
            raise ValueError(f"ranking must be a permutation of 1..{k}")
        key = (request.session_id, request.annotator_id, request.item_id, request.criterion)
        self.ratings[key] = dict(request.ranking)
        self._append({
            "type": "rating",
            "session_id": request.session_id,
            "annotator_id": request.annotator_id,
            "item_id": request.item_id,
            "criterion": request.criterion,
            "ranking": dict(request.ranking),
        })

    def item_status(self, session: SessionDef, annotator: str, item_id: str) -> dict[str, bool]:
        return {
            criterion: (session.session_id, annotator, item_id, criterion) in self.ratings
            for criterion in CRITERIA
        }

    def aggregate(self, session_id: str) -> dict:
        session = self.sessions.get(session_id)
        if session is None:
            raise KeyError(session_id)
        sums: dict[str, dict[str, float]] = {c: {} for c in CRITERIA}
        counts: dict[str, dict[str, int]] = {c: {} for c in CRITERIA}
        n_ratings = 0
        for (sid, _annotator, item_id, criterion), ranking in sorted(self.ratings.items()):
            if sid != session_id:
                continue
            item = session.item(item_id)
            k = len(item.slots)
            total = sum(ranking.values())
            if total != k * (k + 1) // 2:  # conservation check on every aggregate
                raise ValueError(f"rank sum {total} != {k * (k + 1) // 2} for item {item_id}")
            n_ratings += 1
            for slot in item.slots:
                rank_value = ranking[slot.slot_id]
                sums[criterion][slot.method_id] = sums[criterion].get(slot.method_id, 0.0) + rank_value
                counts[criterion][slot.method_id] = counts[criterion].get(slot.method_id, 0) + 1
        means = {
            criterion: {
                method: sums[criterion][method] / counts[criterion][method]
                for method in sorted(sums[criterion])
            }
            for criterion in CRITERIA
        }
        return {"session_id": session_id, "criteria": means, "n_ratings": n_ratings}


def _item_view(store: AnnotationStore, session: SessionDef, item: ItemDef, annotator: str) -> dict:
    order = _shuffle_for(session.seed, annotator, item.item_id, len(item.slots))
    slots = [item.slots[i].slot_id for i in order]
    return {
        "item_id": item.item_id,
        "entity_display": item.display,
        "context": list(item.context),
        "criteria": list(CRITERIA),
        "criterion_prompts": CRITERION_PROMPTS,
        "slots": slots,
        "image_urls": {
            slot_id: f"/items/{item.item_id}/slots/{slot_id}/image" for slot_id in slots
        },
        "status": store.item_status(session, annotator, item.item_id),
    }


def create_app(store_dir, frontend_dir=None) -> FastAPI:
    app = FastAPI(title="kg2mmkg annotation service")
    store = AnnotationStore(store_dir)
    app.state.store = store

    @app.post("/sessions")
    def create_session(request: SessionRequest):
        try:
            session = store.create_session(request)
        except (ValueError, FileNotFoundError, KeyError) as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return {"session_id": session.session_id, "n_items": len(session.items)}

    @app.get("/sessions")
    def list_sessions():
        return [
            {
                "session_id": s.session_id,
                "dataset_tag": s.dataset_tag,
                "n_items": len(s.items),
            }
            for s in store.sessions.values()
        ]

    @app.get("/sessions/{session_id}/items")
    def session_items(session_id: str, annotator: str = Query(...)):
        session = store.sessions.get(session_id)
        if session is None:
            raise HTTPException(status_code=404, detail="unknown session")
        return {
            "session_id": session_id,
            "dataset_tag": session.dataset_tag,
            "items": [_item_view(store, session, item, annotator) for item in session.items],
        }

    @app.get("/items/{item_id}")
    def item_detail(item_id: str, annotator: str = Query(...)):
        try:
            session, item = store.find_item(item_id)
        except KeyError:
            raise HTTPException(status_code=404, detail="unknown item")
        return _item_view(store, session, item, annotator)

    @app.get("/items/{item_id}/slots/{slot_id}/image")
    def slot_image(item_id: str, slot_id: str):
        try:
            _session, item = store.find_item(item_id)
        except KeyError:
            raise HTTPException(status_code=404, detail="unknown item")
        for slot in item.slots:
            if slot.slot_id == slot_id:
                data = Path(slot.image_path).read_bytes()
                return Response(content=data, media_type="image/png")
        raise HTTPException(status_code=404, detail="unknown slot")

    @app.post("/ratings")
    def submit_rating(request: RatingRequest):
        try:
            store.submit(request)
        except KeyError as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return {"status": "ok"}

    @app.get("/sessions/{session_id}/progress")
    def progress(session_id: str, annotator: str = Query(...)):
        session = store.sessions.get(session_id)
        if session is None:
            raise HTTPException(status_code=404, detail="unknown session")
        per_criterion = {}
        for criterion in CRITERIA:
            done = sum(
                1 for item in session.items
                if (session_id, annotator, item.item_id, criterion) in store.ratings
            )
            per_criterion[criterion] = {"done": done, "total": len(session.items)}
        total = len(session.items) * len(CRITERIA)
        done_total = sum(v["done"] for v in per_criterion.values())
        return {
            "session_id": session_id,
            "annotator_id": annotator,
            "per_criterion": per_criterion,
            "done": done_total,
            "total": total,
        }

    @app.get("/sessions/{session_id}/results")
    def results(session_id: str):
        try:
            return store.aggregate(session_id)
        except KeyError:
            raise HTTPException(status_code=404, detail="unknown session")
        except ValueError as exc:
            raise HTTPException(status_code=500, detail=str(exc))

    if frontend_dir is not None and Path(frontend_dir).is_dir():
        app.mount("/ui", StaticFiles(directory=str(frontend_dir), html=True), name="ui")

    return app


def main(argv=None) -> int:
    import argparse

    import uvicorn

    parser = argparse.ArgumentParser(description="Run the annotation questionnaire service.")
    parser.add_argument("--store", default="annotation_store", help="event log directory")
    parser.add_argument("--frontend", default=None, help="built questionnaire UI directory")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8808)
    args = parser.parse_args(argv)
    app = create_app(args.store, frontend_dir=args.frontend)
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


if __name__ == "__main__":
    import sys

    sys.exit(main())
