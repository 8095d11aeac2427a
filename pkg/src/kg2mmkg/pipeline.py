"""Pipeline orchestration: configuration, stages, caching, and the manifest.

Stages run in dependency order behind the CLI; every artifact is written
atomically (temp file + rename) and cache keys are content hashes of the
stage inputs plus the relevant config sections, so reruns with unchanged
inputs make zero backend calls and an interrupted image stage resumes
into a byte-identical manifest.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from .backends import BackendEndpoint, BackendError, ImageArtifact, build_backend
from .encoder import EmbeddingTable, EncoderConfig, train
from .kg import KgError, KnowledgeGraph, load_kg
from .kgc import (
    KgcConfig,
    evaluate,
    load_image_features,
    save_image_features,
    train_transe,
    write_kgc_report,
)
from .metrics import MetricReport, best_of_reals
from .prompts import gen_prompt
from .sns import select_neighbors, write_selected_neighbors
from .vns import (
    filter_relations,
    naturalize,
    score_relation,
    write_relation_scores,
)

logger = logging.getLogger(__name__)

STAGES = (
    "load",
    "train-embed",
    "score-relations",
    "select-neighbors",
    "gen-prompts",
    "gen-images",
    "eval",
    "kgc",
    "all",
)
STRATEGIES = ("vsns", "name-only", "longest-token")

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class PipelineError(Exception):
    pass


class ConfigError(PipelineError):
    pass


class UpstreamMissingError(PipelineError):
    def __init__(self, artifact: str, stage: str):
        super().__init__(f"missing artifact {artifact!r}; run stage {stage!r} first")
        self.stage = stage


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def atomic_write_bytes(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


@dataclass
class PipelineConfig:
    train_path: Path
    valid_path: Path | None = None
    test_path: Path | None = None
    labels_path: Path | None = None
    output_dir: Path = Path("out")
    seed: int = 0
    strategy: str = "vsns"
    samples_per_relation: int = 10
    threshold: float = 0.5
    vns_splits: tuple[str, ...] = ("train",)
    heads_only: bool = False
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    word_cap: int = 60
    use_llm: bool = True
    image_size: tuple[int, int] = (256, 256)
    backends: dict[str, BackendEndpoint] = field(default_factory=dict)
    reals_dir: Path | None = None
    paired_only: bool = True
    kgc_enabled: bool = False
    kgc: KgcConfig = field(default_factory=KgcConfig)
    cache: bool = True

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}")
        if not Path(self.train_path).exists():
            raise ConfigError(f"train file not found: {self.train_path}")
        for name in ("valid_path", "test_path", "labels_path"):
            value = getattr(self, name)
            if value is not None and not Path(value).exists():
                raise ConfigError(f"{name.replace('_', ' ')} not found: {value}")
        if self.samples_per_relation < 1 or self.word_cap < 1:
            raise ConfigError("samples_per_relation and word_cap must be positive")
        if self.image_size[0] < 1 or self.image_size[1] < 1:
            raise ConfigError("image size must be positive")
        for kind in ("t2i", "reward", "embed", "llm"):
            self.backends.setdefault(
                kind, BackendEndpoint(kind=f"mock-{kind}", mock_seed=self.seed)
            )

    @classmethod
    def from_toml(cls, path, overrides: dict | None = None) -> "PipelineConfig":
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: invalid TOML: {exc}")
        return cls.from_dict(raw, base_dir=Path(path).parent, overrides=overrides)

    @classmethod
    def from_dict(cls, raw: dict, base_dir: Path = Path("."), overrides: dict | None = None) -> "PipelineConfig":
        overrides = overrides or {}

        def resolve(p):
            return None if p is None else (base_dir / p if not Path(p).is_absolute() else Path(p))

        dataset = raw.get("dataset", {})
        if "train" not in dataset:
            raise ConfigError("config must set dataset.train")
        selection = raw.get("selection", {})
        prompts_cfg = raw.get("prompts", {})
        images_cfg = raw.get("images", {})
        eval_cfg = raw.get("eval", {})
        kgc_cfg = dict(raw.get("kgc", {}))
        kgc_enabled = bool(kgc_cfg.pop("enabled", False))
        seed = int(overrides.get("seed", raw.get("seed", 0)))

        backends = {}
        for kind in ("t2i", "reward", "embed", "llm"):
            section = dict(raw.get("backends", {}).get(kind, {}))
            env_url = os.environ.get(f"KG2MMKG_{kind.upper()}_URL")
            if env_url:
                section = {"kind": kind, "base_url": env_url, **{
                    k: v for k, v in section.items() if k not in ("kind", "base_url")
                }}
            if not section:
                section = {"kind": f"mock-{kind}", "mock_seed": seed}
            section.setdefault("mock_seed", seed)
            try:
                backends[kind] = BackendEndpoint(**section)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"backends.{kind}: {exc}")

        try:
            encoder = EncoderConfig(seed=seed, **raw.get("encoder", {}))
            kgc = KgcConfig(seed=seed, **kgc_cfg)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid encoder/kgc section: {exc}")

        try:
            return cls(
                train_path=resolve(dataset["train"]),
                valid_path=resolve(dataset.get("valid")),
                test_path=resolve(dataset.get("test")),
                labels_path=resolve(dataset.get("labels")),
                output_dir=resolve(overrides.get("output_dir", raw.get("output", {}).get("dir", "out"))),
                seed=seed,
                strategy=overrides.get("strategy", selection.get("strategy", "vsns")),
                samples_per_relation=int(selection.get("samples_per_relation", 10)),
                threshold=float(selection.get("threshold", 0.5)),
                vns_splits=tuple(selection.get("vns_splits", ["train"])),
                heads_only=bool(overrides.get("heads_only", selection.get("heads_only", False))),
                encoder=encoder,
                word_cap=int(prompts_cfg.get("word_cap", 60)),
                use_llm=bool(prompts_cfg.get("use_llm", True)),
                image_size=(int(images_cfg.get("width", 256)), int(images_cfg.get("height", 256))),
                backends=backends,
                reals_dir=resolve(eval_cfg.get("reals_dir")),
                paired_only=bool(overrides.get("paired_only", eval_cfg.get("paired_only", True))),
                kgc_enabled=kgc_enabled,
                kgc=kgc,
                cache=bool(raw.get("cache", True)),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc))

    def canonical_dict(self) -> dict:
        """Location-independent view of the config: dataset by content hash."""
        backends = {
            kind: {k: v for k, v in asdict(ep).items() if v is not None}
            for kind, ep in sorted(self.backends.items())
        }
        dataset = {"train": _sha256_file(self.train_path)}
        for name, path in (("valid", self.valid_path), ("test", self.test_path), ("labels", self.labels_path)):
            if path is not None:
                dataset[name] = _sha256_file(path)
        return {
            "dataset": dataset,
            "seed": self.seed,
            "strategy": self.strategy,
            "selection": {
                "samples_per_relation": self.samples_per_relation,
                "threshold": self.threshold,
                "vns_splits": list(self.vns_splits),
                "heads_only": self.heads_only,
            },
            "encoder": asdict(self.encoder),
            "prompts": {"word_cap": self.word_cap, "use_llm": self.use_llm},
            "images": {"width": self.image_size[0], "height": self.image_size[1]},
            "backends": backends,
            "kgc": {"enabled": self.kgc_enabled, **asdict(self.kgc)},
        }

    def config_hash(self) -> str:
        return _sha256_text(json.dumps(self.canonical_dict(), sort_keys=True))

    def section_hash(self, *sections: str) -> str:
        whole = self.canonical_dict()
        picked = {s: whole[s] for s in sections}
        picked["seed"] = self.seed
        picked["tool_version"] = __version__  # code changes invalidate caches
        return _sha256_text(json.dumps(picked, sort_keys=True))


def _slug(label: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", label)[:60]


class _Counting:
    """Backend proxy counting logical calls, for cache-hit verification."""

    def __init__(self, inner):
        self._inner = inner
        self.calls = 0

    def __getattr__(self, name):
        attr = getattr(self._inner, name)
        if not callable(attr):
            return attr

        def wrapper(*args, **kwargs):
            self.calls += 1
            return attr(*args, **kwargs)

        return wrapper


class Pipeline:
    """Owns one output directory; stages read and write artifacts inside it."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.out = Path(cfg.output_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "images").mkdir(exist_ok=True)
        self._graph: KnowledgeGraph | None = None
        self._backends: dict[str, _Counting] = {}
        self._timings: dict[str, float] = {}

    # ---- shared state ----------------------------------------------------

    @property
    def graph(self) -> KnowledgeGraph:
        if self._graph is None:
            try:
                self._graph = load_kg(
                    self.cfg.train_path, self.cfg.valid_path, self.cfg.test_path,
                    labels_path=self.cfg.labels_path,
                )
            except KgError as exc:
                raise ConfigError(f"dataset failed to load: {exc}") from exc
        return self._graph

    def backend(self, kind: str) -> _Counting:
        if kind not in self._backends:
            self._backends[kind] = _Counting(build_backend(self.cfg.backends[kind]))
        return self._backends[kind]

    @property
    def backend_calls(self) -> int:
        return sum(b.calls for b in self._backends.values())

    def target_entities(self) -> list[int]:
        g = self.graph
        if self.cfg.heads_only:
            return sorted(h for h in range(g.num_entities) if g.neighbors(h, split="train"))
        return list(range(g.num_entities))

    # ---- cache -----------------------------------------------------------

    def _cache_path(self) -> Path:
        return self.out / "cache.json"

    def _cache_load(self) -> dict:
        path = self._cache_path()
        if path.exists():
            try:
                return json.loads(path.read_text(encoding="utf-8"))
            except json.JSONDecodeError:
                return {}
        return {}

    def _cache_fresh(self, stage: str, key: str, outputs: list[Path]) -> bool:
        if not self.cfg.cache:
            return False
        entry = self._cache_load().get(stage)
        if not entry or entry.get("key") != key:
            return False
        return all(Path(p).exists() for p in entry.get("outputs", [])) and all(
            p.exists() for p in outputs
        )

    def _cache_store(self, stage: str, key: str, outputs: list[Path]) -> None:
        cache = self._cache_load()
        cache[stage] = {"key": key, "outputs": [str(p) for p in outputs]}
        atomic_write_text(self._cache_path(), json.dumps(cache, indent=2, sort_keys=True))

    def _require(self, path: Path, stage: str) -> Path:
        if not path.exists():
            raise UpstreamMissingError(str(path), stage)
        return path

    # ---- stages ----------------------------------------------------------

    def run(self, stage: str) -> dict:
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}; valid: {', '.join(STAGES)}")
        if stage == "all":
            result = {}
            for step in self._plan():
                result[step] = self._dispatch(step)
            self._write_run_info()
            return result
        out = self._dispatch(stage)
        self._write_run_info()
        return {stage: out}

    def _plan(self) -> list[str]:
        steps = ["load"]
        if self.cfg.strategy == "vsns":
            steps += ["train-embed", "score-relations"]
        steps += ["select-neighbors", "gen-prompts", "gen-images"]
        if self.cfg.reals_dir is not None:
            steps.append("eval")
        if self.cfg.kgc_enabled:
            steps.append("kgc")
        return steps

    def _dispatch(self, stage: str) -> dict:
        impl = {
            "load": self._stage_load,
            "train-embed": self._stage_train_embed,
            "score-relations": self._stage_score_relations,
            "select-neighbors": self._stage_select_neighbors,
            "gen-prompts": self._stage_gen_prompts,
            "gen-images": self._stage_gen_images,
            "eval": self._stage_eval,
            "kgc": self._stage_kgc,
        }[stage]
        started = time.monotonic()
        result = impl()
        self._timings[stage] = time.monotonic() - started
        return result

    def _write_run_info(self) -> None:
        # wall-clock data lives here and only here; manifests stay deterministic
        info = {
            "tool_version": __version__,
            "completed_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "stage_seconds": {k: round(v, 3) for k, v in self._timings.items()},
            "backend_calls": self.backend_calls,
        }
        atomic_write_text(self.out / "run_info.json", json.dumps(info, indent=2, sort_keys=True))

    def _stage_load(self) -> dict:
        path = self.out / "graph_summary.json"
        key = self.cfg.section_hash("dataset")
        if self._cache_fresh("load", key, [path]):
            return {"cached": True, "path": str(path)}
        g = self.graph
        summary = {
            "n_entities": g.num_entities,
            "n_relations": g.num_relations,
            "splits": {name: len(pos) for name, pos in g.splits.items()},
            "config_hash": self.cfg.config_hash(),
        }
        atomic_write_text(path, json.dumps(summary, indent=2, sort_keys=True))
        self._cache_store("load", key, [path])
        return summary

    def _stage_train_embed(self) -> dict:
        path = self.out / "embeddings.json"
        key = self.cfg.section_hash("dataset", "encoder")
        if self._cache_fresh("train-embed", key, [path]):
            return {"cached": True, "path": str(path)}
        table = train(self.graph, self.cfg.encoder)
        tmp = path.with_name(path.name + ".tmp")
        table.save(tmp)
        os.replace(tmp, path)
        self._cache_store("train-embed", key, [path])
        return {"path": str(path), "final_loss": table.final_loss}

    def _stage_score_relations(self) -> dict:
        path = self.out / "relation_scores.json"
        key = self.cfg.section_hash("dataset", "selection", "images", "backends")
        if self._cache_fresh("score-relations", key, [path]):
            return {"cached": True, "path": str(path)}
        g = self.graph
        scores = [
            score_relation(
                g, rel,
                self.backend("t2i"), self.backend("reward"),
                k=self.cfg.samples_per_relation,
                threshold=self.cfg.threshold,
                seed=self.cfg.seed,
                image_size=self.cfg.image_size,
                splits=self.cfg.vns_splits,
            )
            for rel in range(g.num_relations)
        ]
        tmp = path.with_name(path.name + ".tmp")
        write_relation_scores(tmp, scores, g)
        os.replace(tmp, path)
        self._cache_store("score-relations", key, [path])
        visualizable = sorted(g.relations.label(r) for r in filter_relations(scores))
        return {"path": str(path), "visualizable": visualizable}

    def _load_visualizable(self) -> set[int]:
        path = self._require(self.out / "relation_scores.json", "score-relations")
        rows = json.loads(path.read_text(encoding="utf-8"))
        return {
            self.graph.relations.handle(row["relation"])
            for row in rows
            if row["visualizable"]
        }

    def _stage_select_neighbors(self) -> dict:
        g = self.graph
        path = self.out / "selections.jsonl"
        detail_path = self.out / "selected_neighbors.jsonl"
        sections = ["dataset", "selection", "strategy"]
        upstream = []
        if self.cfg.strategy == "vsns":
            upstream = [
                _sha256_file(self._require(self.out / "embeddings.json", "train-embed")),
                _sha256_file(self._require(self.out / "relation_scores.json", "score-relations")),
            ]
        key = self.cfg.section_hash("dataset", "selection") + _sha256_text(
            self.cfg.strategy + "".join(upstream)
        )
        outputs = [path] + ([detail_path] if self.cfg.strategy == "vsns" else [])
        if self._cache_fresh("select-neighbors", key, outputs):
            return {"cached": True, "path": str(path)}

        rows = []
        if self.cfg.strategy == "vsns":
            emb = EmbeddingTable.load(self.out / "embeddings.json")
            allowed = self._load_visualizable()
            detailed = []
            for head in self.target_entities():
                sel = select_neighbors(g, emb, head, allowed)
                detailed.append(sel)
                rows.append(_selection_row(g, head, [
                    (rel, tail, next(ns.sim for ns in sel.groups[rel].selected if ns.tail == tail))
                    for rel, tail in sel.selected_pairs()
                ]))
            tmp = detail_path.with_name(detail_path.name + ".tmp")
            write_selected_neighbors(tmp, detailed, g)
            os.replace(tmp, detail_path)
        elif self.cfg.strategy == "name-only":
            rows = [_selection_row(g, head, []) for head in self.target_entities()]
        else:  # longest-token
            for head in self.target_entities():
                picked = longest_token_selection(g, head)
                rows.append(_selection_row(g, head, [(r, t, None) for r, t in picked]))

        atomic_write_text(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
        self._cache_store("select-neighbors", key, outputs)
        return {"path": str(path), "n_entities": len(rows)}

    def _read_selections(self) -> list[dict]:
        path = self._require(self.out / "selections.jsonl", "select-neighbors")
        return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines()]

    def _stage_gen_prompts(self) -> dict:
        path = self.out / "prompts.jsonl"
        upstream = _sha256_file(self._require(self.out / "selections.jsonl", "select-neighbors"))
        key = self.cfg.section_hash("prompts", "backends") + upstream
        if self._cache_fresh("gen-prompts", key, [path]):
            return {"cached": True, "path": str(path)}
        g = self.graph
        llm = self.backend("llm") if self.cfg.use_llm else None
        lines = []
        for row in self._read_selections():
            head = g.entities.handle(row["entity"])
            facts = [
                f"{naturalize(g.display(n['relation']))} {g.display(n['tail'])}"
                for n in row["selected"]
            ]
            # empty neighbor set: name-only fallback, straight to the template
            entity_llm = llm if facts else None
            record = gen_prompt(head, g.display(row["entity"]), facts, llm=entity_llm, cap=self.cfg.word_cap)
            lines.append(json.dumps({
                "entity": row["entity"],
                "facts": list(record.facts),
                "prompt": record.prompt,
                "source": record.source,
                "word_count": record.word_count,
                "truncated": record.truncated,
                "downgraded": record.downgraded,
                "instruction_sha256": _sha256_text(record.instruction),
            }, sort_keys=True))
        atomic_write_text(path, "".join(line + "\n" for line in lines))
        self._cache_store("gen-prompts", key, [path])
        return {"path": str(path), "n_prompts": len(lines)}

    def _stage_gen_images(self) -> dict:
        manifest_path = self.out / "manifest.jsonl"
        upstream = _sha256_file(self._require(self.out / "prompts.jsonl", "gen-prompts"))
        key = self.cfg.section_hash("images", "backends") + upstream
        if self._cache_fresh("gen-images", key, [manifest_path]):
            return {"cached": True, "path": str(manifest_path)}

        g = self.graph
        prompts = {
            json.loads(line)["entity"]: json.loads(line)
            for line in (self.out / "prompts.jsonl").read_text(encoding="utf-8").splitlines()
        }
        selections = {row["entity"]: row for row in self._read_selections()}
        header = {
            "type": "header",
            "config_hash": self.cfg.config_hash(),
            "tool_version": __version__,
            "strategy": self.cfg.strategy,
            "seed": self.cfg.seed,
        }
        if self.cfg.strategy == "longest-token":
            header["tokenizer"] = LONGEST_TOKEN_RULE

        done: dict[str, dict] = {}
        if manifest_path.exists():
            existing = read_manifest(manifest_path)
            if existing and existing[0] == header:
                for record in existing[1:]:
                    image_path = self.out / record["image"]
                    if image_path.exists() and _sha256_file(image_path) == record["image_sha256"]:
                        done[record["entity"]] = record
                    else:
                        break  # records are ordered; regenerate from here

        records = [header]
        t2i = self.backend("t2i")
        endpoint = self.cfg.backends["t2i"]
        for head in self.target_entities():
            label = g.entities.label(head)
            if label in done:
                records.append(done[label])
                continue
            prompt_row = prompts[label]
            artifact = t2i.generate(prompt_row["prompt"], seed=self.cfg.seed, size=self.cfg.image_size)
            rel_path = Path("images") / f"{head:05d}_{_slug(label)}.png"
            atomic_write_bytes(self.out / rel_path, artifact.data)
            records.append({
                "entity": label,
                "display": g.display(label),
                "neighbors": selections[label]["selected"],
                "prompt": prompt_row["prompt"],
                "prompt_source": prompt_row["source"],
                "instruction_sha256": prompt_row["instruction_sha256"],
                "image": str(rel_path),
                "image_sha256": artifact.sha256,
                "width": artifact.width,
                "height": artifact.height,
                "backend": {"kind": endpoint.kind, "url": endpoint.base_url},
                "seed": self.cfg.seed,
            })
            # rewrite-then-rename after every record: a kill leaves a valid
            # prefix and resume continues from it
            atomic_write_text(
                manifest_path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
            )
        atomic_write_text(
            manifest_path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
        )
        self._cache_store("gen-images", key, [manifest_path])
        return {"path": str(manifest_path), "n_records": len(records) - 1, "resumed": len(done)}

    def _reals_for(self, label: str) -> list[Path]:
        root = Path(self.cfg.reals_dir) / _slug(label)
        if not root.is_dir():
            return []
        return sorted(root.glob("*.png"))[:3]

    def _stage_eval(self) -> dict:
        if self.cfg.reals_dir is None:
            raise ConfigError("eval requires eval.reals_dir in the config")
        path = self.out / "metrics_report.json"
        manifest_path = self._require(self.out / "manifest.jsonl", "gen-images")
        key = self.cfg.section_hash("backends") + _sha256_file(manifest_path) + str(self.cfg.reals_dir)
        if self._cache_fresh("eval", key, [path]):
            return {"cached": True, "path": str(path)}
        embedder = self.backend("embed")
        report = MetricReport()
        for record in read_manifest(manifest_path)[1:]:
            reals = self._reals_for(record["entity"])
            if not reals:
                report.skip(record["entity"], "no real images")
                continue
            try:
                gen = ImageArtifact.from_png(
                    (self.out / record["image"]).read_bytes(), record["seed"], record["prompt"]
                )
                real_artifacts = [
                    ImageArtifact.from_png(p.read_bytes(), 0, "") for p in reals
                ]
            except BackendError as exc:
                report.skip(record["entity"], f"undecodable image: {exc}")
                continue
            fid_min, clip_max = best_of_reals(gen, real_artifacts, embedder)
            report.add(record["entity"], fid_min, clip_max)
        tmp = path.with_name(path.name + ".tmp")
        report.write(tmp)
        os.replace(tmp, path)
        self._cache_store("eval", key, [path])
        return {"path": str(path), **report.aggregates()}

    def _stage_kgc(self) -> dict:
        g = self.graph
        path = self.out / "kgc_report.json"
        features_path = self.out / "image_features.json"
        key = self.cfg.section_hash("dataset", "kgc", "backends")
        if self.cfg.kgc.fusion == "image-add":
            key += _sha256_file(self._require(self.out / "manifest.jsonl", "gen-images"))
        if self._cache_fresh("kgc", key, [path]):
            return {"cached": True, "path": str(path)}
        reports = []
        structure_cfg = KgcConfig(**{**asdict(self.cfg.kgc), "fusion": "none"})
        baseline = train_transe(g, structure_cfg)
        reports.append(evaluate(g, baseline, "filtered"))
        if self.cfg.kgc.fusion == "image-add":
            if not features_path.exists():
                manifest_path = self._require(self.out / "manifest.jsonl", "gen-images")
                embedder = self.backend("embed")
                features = {}
                for record in read_manifest(manifest_path)[1:]:
                    artifact = ImageArtifact.from_png(
                        (self.out / record["image"]).read_bytes(), record["seed"], record["prompt"]
                    )
                    features[record["entity"]] = embedder.embed_image(artifact)
                tmp = features_path.with_name(features_path.name + ".tmp")
                save_image_features(tmp, features)
                os.replace(tmp, features_path)
            image_features = load_image_features(features_path, g)
            fused = train_transe(g, self.cfg.kgc, image_features=image_features)
            reports.append(evaluate(g, fused, "filtered"))
        tmp = path.with_name(path.name + ".tmp")
        write_kgc_report(tmp, reports)
        os.replace(tmp, path)
        self._cache_store("kgc", key, [path])
        return {"path": str(path), "reports": [r.to_payload() for r in reports]}


def _selection_row(g: KnowledgeGraph, head: int, picked: list[tuple[int, int, float | None]]) -> dict:
    return {
        "entity": g.entities.label(head),
        "selected": [
            {
                "relation": g.relations.label(rel),
                "tail": g.entities.label(tail),
                "sim": None if sim is None else round(sim, 6),
            }
            for rel, tail, sim in picked
        ],
        "fallback_name_only": not picked,
    }


LONGEST_TOKEN_RULE = "whitespace token count; ties by character length, then label order"


def longest_token_selection(g: KnowledgeGraph, head: int, split: str = "train") -> list[tuple[int, int]]:
    """Per relation, the neighbor whose display label has the most
    whitespace tokens; ties break toward longer label, then label order."""
    by_rel: dict[int, list[int]] = {}
    for rel, tail in g.neighbors(head, split=split):
        by_rel.setdefault(rel, []).append(tail)
    picked = []
    for rel in sorted(by_rel):
        def sort_key(tail: int):
            label = g.display(g.entities.label(tail))
            return (-len(label.split()), -len(label), label)

        winner = sorted(by_rel[rel], key=sort_key)[0]
        picked.append((rel, winner))
    return picked


def read_manifest(path) -> list[dict]:
    records = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            records.append(json.loads(line))
    return records


def verify_manifest(path) -> int:
    """Check every referenced image exists and hashes correctly; returns count."""
    records = read_manifest(path)
    if not records or records[0].get("type") != "header":
        raise PipelineError(f"{path}: missing manifest header")
    base = Path(path).parent
    for record in records[1:]:
        image = base / record["image"]
        if not image.exists():
            raise PipelineError(f"{path}: missing image {record['image']}")
        if _sha256_file(image) != record["image_sha256"]:
            raise PipelineError(f"{path}: hash mismatch for {record['image']}")
    return len(records) - 1


def run_stage(stage: str, cfg: PipelineConfig) -> dict:
    return Pipeline(cfg).run(stage)


def _selection_set(record: dict) -> frozenset:
    return frozenset((n["relation"], n["tail"]) for n in record["neighbors"])


def compare_methods(
    manifests: dict[str, Path],
    reals_dir: Path | None,
    embedder,
    paired_only: bool = True,
) -> dict:
    """Pairwise method comparison restricted to differing selections.

    Per method pair the comparison set holds entities whose selected
    neighbor sets differ; with a reals directory each method gets mean
    best-of-reals metrics over that set.
    """
    if len(manifests) < 2:
        raise PipelineError("compare_methods needs at least two manifests")
    loaded = {}
    for name, path in manifests.items():
        records = read_manifest(path)
        loaded[name] = {rec["entity"]: rec for rec in records[1:]}

    names = sorted(loaded)
    common = set.intersection(*(set(v) for v in loaded.values()))
    if any(len(v) != len(common) for v in loaded.values()):
        logger.warning(
            "manifests cover different entity sets; comparing the %d common entities", len(common)
        )

    pairs = []
    for i, name_a in enumerate(names):
        for name_b in names[i + 1:]:
            if paired_only:
                entities = sorted(
                    e for e in common
                    if _selection_set(loaded[name_a][e]) != _selection_set(loaded[name_b][e])
                )
            else:
                entities = sorted(common)
            pair: dict = {
                "methods": [name_a, name_b],
                "n_compared": len(entities),
                "entities": entities,
                "metrics": None,
            }
            if reals_dir is not None and entities:
                pair["metrics"] = {}
                for name in (name_a, name_b):
                    report = MetricReport()
                    for entity in entities:
                        record = loaded[name][entity]
                        reals = sorted((Path(reals_dir) / _slug(entity)).glob("*.png"))[:3]
                        if not reals:
                            report.skip(entity, "no real images")
                            continue
                        base = Path(manifests[name]).parent
                        gen = ImageArtifact.from_png(
                            (base / record["image"]).read_bytes(), record["seed"], record["prompt"]
                        )
                        fid_min, clip_max = best_of_reals(
                            gen, [ImageArtifact.from_png(p.read_bytes(), 0, "") for p in reals], embedder
                        )
                        report.add(entity, fid_min, clip_max)
                    pair["metrics"][name] = report.aggregates()
            pairs.append(pair)
    return {
        "paired_only": paired_only,
        "longest_token_rule": LONGEST_TOKEN_RULE,
        "pairs": pairs,
    }
