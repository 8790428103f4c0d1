import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from budgetattn.data import (MARKER, PAD, UNK, MarkedTaskConfig, Vocabulary, gen_marked, load_text_csv,
                             make_marked_example, make_marked_split, marked_vocab_size, read_jsonl,
                             relabel, tokenize, value_token, write_jsonl)


def test_matching_values_label_one():
    e = make_marked_example(6, (0, 3), (2, 2), [0] * 6, n_values=4)
    assert e.tokens[0] == MARKER and e.tokens[3] == MARKER
    assert e.tokens[1] == value_token(2) and e.tokens[4] == value_token(2)
    assert e.label == 1


def test_mismatching_values_label_zero():
    assert make_marked_example(6, (0, 3), (1, 3), [0] * 6, n_values=4).label == 0


def test_overlapping_pairs_rejected():
    with pytest.raises(ValueError):
        make_marked_example(6, (0, 1), (1, 1), [0] * 6, n_values=4)


def test_same_seed_identical_bytes(tmp_path):
    write_jsonl(gen_marked(5, 50, 16, 4), tmp_path / "a.jsonl")
    write_jsonl(gen_marked(5, 50, 16, 4), tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert read_jsonl(tmp_path / "a.jsonl") == gen_marked(5, 50, 16, 4)


def test_seq_len_too_small():
    with pytest.raises(ValueError, match="too small"):
        gen_marked(0, 4, seq_len=3)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, 120), st.integers(4, 40), st.integers(2, 9))
def test_generated_examples_well_formed(seed, n, seq_len, n_values):
    ex = gen_marked(seed, n, seq_len, n_values)
    vocab = marked_vocab_size(n_values)
    positives = sum(e.label for e in ex)
    assert abs(positives - n / 2) <= 1
    for e in ex:
        assert len(e.tokens) == seq_len
        assert all(0 < t < vocab for t in e.tokens)
        assert relabel(e.tokens, n_values) == e.label
        # fillers never collide with values or markers
        marks = [i for i, t in enumerate(e.tokens) if t == MARKER]
        value_pos = {m + 1 for m in marks}
        for i, t in enumerate(e.tokens):
            if i not in value_pos and t != MARKER:
                assert t >= 2 + n_values


def test_split_sizes_and_balance():
    ds = make_marked_split(3, MarkedTaskConfig(seq_len=20, n_values=4, n_train=100, n_val=40, n_test=20))
    assert (len(ds.train), len(ds.val), len(ds.test)) == (100, 40, 20)
    for part in (ds.train, ds.val, ds.test):
        assert abs(sum(e.label for e in part) - len(part) / 2) <= 1
    ids = lambda part: {id(e) for e in part}
    assert not ids(ds.train) & ids(ds.val) and not ids(ds.val) & ids(ds.test)
    assert ds.vocab_size == marked_vocab_size(4)


# ---------------------------------------------------------------- CSV

CSV = """label,text
1,"The cat sat, on the mat!"
2,"A dog; the DOG barked."
"""


def test_tokenize():
    assert tokenize("The cat sat, on the mat!") == ["the", "cat", "sat", "on", "the", "mat"]


def test_csv_toy_fixture(tmp_path):
    (tmp_path / "toy.csv").write_text(CSV)
    ds = load_text_csv(tmp_path / "toy.csv", vocab_size=6, seq_len=8, n_val=0)
    # counts: the=3, dog=2, then a/barked/cat/mat/on/sat once each -> alphabetical
    assert ds.vocab == ["<pad>", "<unk>", "the", "dog", "a", "barked"]
    by_label = {e.label: e.tokens for e in ds.train}
    assert by_label[0] == [2, UNK, UNK, UNK, 2, UNK, PAD, PAD]
    assert by_label[1] == [4, 3, 2, 3, 5, PAD, PAD, PAD]
    assert ds.num_classes == 2


def test_csv_truncates(tmp_path):
    (tmp_path / "t.csv").write_text("label,text\n0," + " ".join(["w"] * 50) + "\n")
    ds = load_text_csv(tmp_path / "t.csv", vocab_size=10, seq_len=7, n_val=0)
    assert ds.train[0].tokens == [2] * 7


def test_csv_headerless_multi_column(tmp_path):
    (tmp_path / "ag.csv").write_text('3,"Title here","body text"\n1,"Other","words"\n')
    ds = load_text_csv(tmp_path / "ag.csv", vocab_size=20, seq_len=4, n_val=0)
    assert sorted(e.label for e in ds.train) == [0, 1]
    assert ds.config["labels"] == ["1", "3"]


def test_csv_malformed_row(tmp_path):
    (tmp_path / "bad.csv").write_text("label,text\n1,ok\nlonely\n")
    with pytest.raises(ValueError, match=":3:"):
        load_text_csv(tmp_path / "bad.csv", vocab_size=10, seq_len=4, n_val=0)


def test_csv_empty_split(tmp_path):
    (tmp_path / "one.csv").write_text("label,text\n1,only row\n")
    with pytest.raises(ValueError, match="empty"):
        load_text_csv(tmp_path / "one.csv", vocab_size=10, seq_len=4, n_val=1)


def test_csv_validation_from_shuffled_head(tmp_path):
    rows = "\n".join(f"{i % 2},word{i} common" for i in range(30))
    (tmp_path / "d.csv").write_text("label,text\n" + rows + "\n")
    test_rows = "label,text\n0,word3 unseen\n"
    (tmp_path / "t.csv").write_text(test_rows)
    ds = load_text_csv(tmp_path / "d.csv", vocab_size=50, seq_len=3, n_val=5, test_path=tmp_path / "t.csv", seed=1)
    assert (len(ds.train), len(ds.val), len(ds.test)) == (25, 5, 1)
    train_words = {w for e in ds.train for w in Vocabulary(ds.vocab[2:]).decode(e.tokens)}
    val_only = {f"word{i}" for i in range(30)} - train_words
    # words that appear only in validation rows map to UNK
    for e in ds.val:
        assert UNK in e.tokens
    assert len(val_only) == 5


@settings(max_examples=30, deadline=None)
@given(st.lists(st.text(alphabet="abcde xyz", min_size=1, max_size=30), min_size=1, max_size=10))
def test_vocab_roundtrip(texts):
    vocab = Vocabulary.build(texts, 50)
    for w in vocab.words[2:]:
        assert vocab.decode([vocab.index[w]]) == [w]
        assert vocab.index[vocab.words[vocab.index[w]]] == vocab.index[w]


@pytest.mark.parametrize("sizes", [(7, 5, 3), (9, 1, 1), (1, 1, 1)])
def test_odd_split_sizes(sizes):
    cfg = MarkedTaskConfig(seq_len=12, n_values=3, n_train=sizes[0], n_val=sizes[1], n_test=sizes[2])
    ds = make_marked_split(0, cfg)
    assert (len(ds.train), len(ds.val), len(ds.test)) == sizes
