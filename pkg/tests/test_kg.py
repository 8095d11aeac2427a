import json

import pytest

from kg2mmkg.kg import (
    KgLookupError,
    KgParseError,
    KgValidationError,
    Triple,
    build_indices,
    load_kg,
    save_kg,
)


def write_tsv(path, rows):
    path.write_text("".join(f"{h}\t{r}\t{t}\n" for h, r, t in rows), encoding="utf-8")
    return path


@pytest.fixture
def tiny_graph(tmp_path):
    # {(a,r,b),(b,r,c),(a,s,c)}
    train = write_tsv(tmp_path / "train.tsv", [("a", "r", "b"), ("b", "r", "c"), ("a", "s", "c")])
    return load_kg(train)


def test_three_line_file_counts_and_index(tiny_graph):
    g = tiny_graph
    assert g.num_entities == 3
    assert g.num_relations == 2
    a = g.entities.handle("a")
    r = g.relations.handle("r")
    s = g.relations.handle("s")
    b = g.entities.handle("b")
    c = g.entities.handle("c")
    assert [(rel, tail) for rel, tail, _ in g.out_index[a]] == [(r, b), (s, c)]


def test_vocab_first_appearance_order(tiny_graph):
    assert tiny_graph.entities.labels() == ["a", "b", "c"]
    assert tiny_graph.relations.labels() == ["r", "s"]


def test_empty_train_file(tmp_path):
    train = tmp_path / "train.tsv"
    train.write_text("", encoding="utf-8")
    g = load_kg(train)
    assert g.num_entities == 0
    assert g.num_relations == 0
    assert g.triples == []
    assert g.out_index == {} and g.rel_index == {}


def test_comments_and_blank_lines_skipped(tmp_path):
    train = tmp_path / "train.tsv"
    train.write_text("# header\n\na\tr\tb\n  # indented comment\n", encoding="utf-8")
    g = load_kg(train)
    assert len(g.triples) == 1


def test_malformed_line_reports_line_number(tmp_path):
    train = tmp_path / "train.tsv"
    train.write_text("a\tr\tb\na\tr\n", encoding="utf-8")
    with pytest.raises(KgParseError) as err:
        load_kg(train)
    assert ":2:" in str(err.value)


def test_empty_field_rejected(tmp_path):
    train = tmp_path / "train.tsv"
    train.write_text("a\t \tb\n", encoding="utf-8")
    with pytest.raises(KgParseError):
        load_kg(train)


def test_duplicate_within_split_rejected(tmp_path):
    train = write_tsv(tmp_path / "train.tsv", [("a", "r", "b"), ("a", "r", "b")])
    with pytest.raises(KgValidationError, match="duplicate"):
        load_kg(train)


def test_cross_split_duplicate_warns_only(tmp_path, caplog):
    train = write_tsv(tmp_path / "train.tsv", [("a", "r", "b"), ("b", "r", "a")])
    valid = write_tsv(tmp_path / "valid.tsv", [("a", "r", "b")])
    with caplog.at_level("WARNING", logger="kg2mmkg.kg"):
        g = load_kg(train, valid)
    assert len(g.splits["valid"]) == 1
    assert any("both train and valid" in m for m in caplog.messages)


def test_unseen_entity_in_valid_rejected_with_offenders(tmp_path):
    train = write_tsv(tmp_path / "train.tsv", [("a", "r", "b")])
    valid = write_tsv(tmp_path / "valid.tsv", [("a", "r", "zz"), ("a", "q", "b")])
    with pytest.raises(KgValidationError) as err:
        load_kg(train, valid)
    msg = str(err.value)
    assert "'zz'" in msg and "'q'" in msg


def test_neighbors_filter_and_full(tiny_graph):
    g = tiny_graph
    a = g.entities.handle("a")
    r = g.relations.handle("r")
    s = g.relations.handle("s")
    b = g.entities.handle("b")
    c = g.entities.handle("c")
    assert g.neighbors(a, allowed={r}) == [(r, b)]
    assert g.neighbors(a) == [(r, b), (s, c)]
    assert g.neighbors(c) == []


def test_neighbors_unknown_entity(tiny_graph):
    with pytest.raises(KgLookupError):
        tiny_graph.neighbors(99)


def test_triples_of_relation_scan(tiny_graph):
    g = tiny_graph
    r = g.relations.handle("r")
    got = g.triples_of_relation(r)
    a, b, c = (g.entities.handle(x) for x in "abc")
    assert got == [Triple(a, r, b), Triple(b, r, c)]
    with pytest.raises(KgLookupError):
        g.triples_of_relation(42)


def test_every_loaded_relation_has_triples(tiny_graph):
    for rel in range(tiny_graph.num_relations):
        assert len(tiny_graph.triples_of_relation(rel)) >= 1


def test_index_rebuild_matches_stored(tiny_graph):
    out, rel = build_indices(tiny_graph.triples)
    assert out == tiny_graph.out_index
    assert rel == tiny_graph.rel_index


def test_triple_count_conservation(tiny_graph):
    g = tiny_graph
    by_rel = sum(len(g.triples_of_relation(r)) for r in range(g.num_relations))
    by_head = sum(len(g.neighbors(h)) for h in range(g.num_entities))
    assert by_rel == by_head == len(g.triples)


def test_save_load_roundtrip(tmp_path):
    train = write_tsv(
        tmp_path / "train.tsv",
        [("a", "r", "b"), ("b", "r", "c"), ("a", "s", "c"), ("c", "s", "a")],
    )
    valid = write_tsv(tmp_path / "valid.tsv", [("b", "s", "a")])
    test = write_tsv(tmp_path / "test.tsv", [("c", "r", "a")])
    labels = tmp_path / "labels.json"
    labels.write_text(json.dumps({"a": "Entity A"}), encoding="utf-8")

    g1 = load_kg(train, valid, test, labels_path=labels)
    out = save_kg(g1, tmp_path / "round")
    g2 = load_kg(out["train"], out["valid"], out["test"], labels_path=out["labels"])

    assert g1.entities == g2.entities
    assert g1.relations == g2.relations
    assert g1.triples == g2.triples
    assert g1.splits == g2.splits
    assert g1.display_names == g2.display_names


def test_display_names_fall_back_to_identifier(tmp_path):
    train = write_tsv(tmp_path / "train.tsv", [("a", "r", "b")])
    labels = tmp_path / "labels.json"
    labels.write_text(json.dumps({"a": "Alpha"}), encoding="utf-8")
    g = load_kg(train, labels_path=labels)
    assert g.display("a") == "Alpha"
    assert g.display("b") == "b"


def test_bad_labels_sidecar_rejected(tmp_path):
    train = write_tsv(tmp_path / "train.tsv", [("a", "r", "b")])
    labels = tmp_path / "labels.json"
    labels.write_text(json.dumps(["not", "a", "map"]), encoding="utf-8")
    with pytest.raises(KgValidationError):
        load_kg(train, labels_path=labels)


def test_split_restricted_queries(tmp_path):
    train = write_tsv(tmp_path / "train.tsv", [("a", "r", "b"), ("b", "r", "c")])
    test = write_tsv(tmp_path / "test.tsv", [("a", "r", "c")])
    g = load_kg(train, test_path=test)
    a = g.entities.handle("a")
    r = g.relations.handle("r")
    assert len(g.triples_of_relation(r)) == 3
    assert len(g.triples_of_relation(r, split="train")) == 2
    assert len(g.neighbors(a)) == 2
    assert len(g.neighbors(a, split="train")) == 1


def test_table1_shaped_synthetic_load(tmp_path):
    # MKG-Y-shaped synthetic file: 15000 entities, 28 relations, 21310 train
    # triples.  The real dataset is not bundled; this checks loader bookkeeping
    # at the published scale.
    import random

    rng = random.Random(7)
    rows = []
    seen = set()
    # force every entity and relation to appear
    for e in range(15000):
        r = e % 28
        t = (e + 1) % 15000
        rows.append((f"e{e}", f"rel{r}", f"e{t}"))
        seen.add((e, r, t))
    while len(rows) < 21310:
        h = rng.randrange(15000)
        r = rng.randrange(28)
        t = rng.randrange(15000)
        if (h, r, t) in seen:
            continue
        seen.add((h, r, t))
        rows.append((f"e{h}", f"rel{r}", f"e{t}"))
    train = write_tsv(tmp_path / "train.tsv", rows)
    g = load_kg(train)
    assert g.num_entities == 15000
    assert g.num_relations == 28
    assert len(g.splits["train"]) == 21310
    assert sum(len(g.triples_of_relation(r, split="train")) for r in range(28)) == 21310
