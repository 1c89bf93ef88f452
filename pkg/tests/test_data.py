import json

import numpy as np
import pytest

from moelab.data import (
    ALPHABET,
    BOS,
    EOS,
    PAD,
    SEP,
    VOCAB_SIZE,
    InstructionPair,
    decode_bytes,
    encode,
    gen_mixture,
    gen_synthetic,
    load_jsonl,
    make_prompt,
    pad_batch,
    shifted_response_labels,
    split_dataset,
)
from moelab.errors import ContractError, IngestionError


def test_vocab_layout():
    assert (BOS, SEP, EOS, PAD) == (256, 257, 258, 259)
    assert VOCAB_SIZE == 260
    assert ALPHABET == b"abcdefghijklmnop"


def test_empty_pair_rejected():
    with pytest.raises(ContractError):
        InstructionPair(b"", b"x")
    with pytest.raises(ContractError):
        InstructionPair(b"x", b"")


# generators -------------------------------------------------------------------


def test_copy_task(rng):
    for p in gen_synthetic("copy", 50, rng, min_len=1, max_len=8):
        assert p.response == p.request
        assert 1 <= len(p.request) <= 8
        assert set(p.request) <= set(ALPHABET)


def test_reverse_task(rng):
    for p in gen_synthetic("reverse", 50, rng, min_len=2, max_len=8):
        assert p.response == p.request[::-1]


def test_sort_task(rng):
    for p in gen_synthetic("sort_bytes", 50, rng, min_len=2, max_len=8):
        assert p.response == bytes(sorted(p.request))


def test_char_arith_task(rng):
    # request is "<word>+<k>"; each letter shifts k places wrapping in a-z
    for p in gen_synthetic("char_arith", 50, rng, min_len=1, max_len=6):
        word, _, k = p.request.partition(b"+")
        shift = int(k)
        assert 1 <= shift <= 3
        expected = bytes((b - ord("a") + shift) % 26 + ord("a") for b in word)
        assert p.response == expected


def test_unknown_task_rejected(rng):
    with pytest.raises(ContractError, match="anagram"):
        gen_synthetic("anagram", 5, rng)


def test_generator_determinism():
    a = gen_synthetic("sort_bytes", 20, np.random.default_rng(9))
    b = gen_synthetic("sort_bytes", 20, np.random.default_rng(9))
    assert a == b


def test_mixture_tags_and_shares(rng):
    pairs = gen_mixture(["copy", "reverse"], 101, rng, 2, 6)
    assert len(pairs) == 101
    tags = [p.request.split(b":", 1)[0].decode() for p in pairs]
    assert set(tags) == {"copy", "reverse"}
    assert tags.count("copy") == 51  # remainder goes to the first task
    assert tags.count("reverse") == 50


def test_mixture_tag_matches_task(rng):
    for p in gen_mixture(["reverse"], 30, rng, 2, 6):
        tag, _, body = p.request.partition(b":")
        assert tag == b"reverse"
        assert p.response == body[::-1]


# encoding --------------------------------------------------------------------


def test_encode_layout():
    ex = encode(InstructionPair(b"ab", b"c"), max_seq=16)
    assert ex.tokens.tolist() == [BOS, ord("a"), ord("b"), SEP, ord("c"), EOS]
    assert ex.response_mask.tolist() == [False, False, False, False, True, True]


def test_encode_mask_never_covers_request(rng):
    for p in gen_mixture(["copy", "sort_bytes"], 40, rng, 1, 10):
        ex = encode(p, max_seq=32)
        sep_at = ex.tokens.tolist().index(SEP)
        assert not ex.response_mask[: sep_at + 1].any()
        assert ex.response_mask[sep_at + 1:].all()


def test_encode_truncates_request_first():
    # request clips to max_seq//2 before the response is cut to the remainder
    ex = encode(InstructionPair(b"abcdefgh", b"wxyz"), max_seq=8)
    assert len(ex.tokens) <= 8
    assert ex.tokens[1:5].tolist() == list(b"abcd")
    assert ex.tokens[5] == SEP
    assert ex.tokens[-1] == EOS


def test_encode_tiny_window_rejected():
    with pytest.raises(ContractError):
        encode(InstructionPair(b"a", b"b"), max_seq=3)


def test_decode_round_trip():
    assert decode_bytes([ord("h"), ord("i")]) == b"hi"
    assert decode_bytes([BOS, ord("x"), EOS, PAD]) == b"x"


def test_make_prompt_is_encode_prefix():
    ex = encode(InstructionPair(b"abc", b"d"), max_seq=16)
    prompt = make_prompt(b"abc", max_seq=16)
    assert ex.tokens[: len(prompt)].tolist() == prompt
    assert prompt[-1] == SEP


def test_make_prompt_truncates_like_encode():
    assert make_prompt(b"abcdefgh", max_seq=8) == [BOS, *b"abcd", SEP]


# jsonl ingestion ---------------------------------------------------------------


def test_load_jsonl_accepts_valid(tmp_path):
    path = tmp_path / "data.jsonl"
    rows = [{"instruction": "ab", "output": "ba"},
            {"instruction": "c", "output": "c"},
            {"instruction": "sum", "input": "1 2", "output": "3"}]
    path.write_text("\n".join(json.dumps(r) for r in rows))
    pairs = load_jsonl(path)
    assert pairs[0] == InstructionPair(b"ab", b"ba")
    assert pairs[2] == InstructionPair(b"sum\n1 2", b"3")


def test_load_jsonl_names_bad_line(tmp_path):
    path = tmp_path / "data.jsonl"
    path.write_text('{"instruction": "a", "output": "b"}\n{"instruction": "a"}\n')
    with pytest.raises(IngestionError, match="line 2"):
        load_jsonl(path)


def test_load_jsonl_collects_all_issues(tmp_path):
    path = tmp_path / "data.jsonl"
    path.write_text('not json\n{"instruction": "a", "output": "b"}\n{"output": "b"}\n')
    with pytest.raises(IngestionError) as exc:
        load_jsonl(path)
    assert [n for n, _ in exc.value.issues] == [1, 3]


def test_load_jsonl_missing_file(tmp_path):
    with pytest.raises(OSError):
        load_jsonl(tmp_path / "nope.jsonl")


def test_load_jsonl_empty_warns(tmp_path, caplog):
    path = tmp_path / "data.jsonl"
    path.write_text("\n\n")
    with caplog.at_level("WARNING"):
        assert load_jsonl(path) == []
    assert "no rows" in caplog.text


# splitting ---------------------------------------------------------------------


def test_split_proportions(rng):
    pairs = gen_synthetic("copy", 3000, rng, 1, 8)
    train, val, test = split_dataset(pairs, rng=np.random.default_rng(1))
    assert len(val) == len(test) == 100
    assert len(train) == 2800


def test_split_partitions_without_loss(rng):
    pairs = gen_synthetic("copy", 90, rng, 1, 8)
    train, val, test = split_dataset(pairs, rng=np.random.default_rng(2))
    assert len(train) + len(val) + len(test) == 90
    key = lambda p: (p.request, p.response)
    assert sorted(train + val + test, key=key) == sorted(pairs, key=key)


def test_split_deterministic(rng):
    pairs = gen_synthetic("sort_bytes", 60, rng, 1, 8)
    a = split_dataset(pairs, rng=np.random.default_rng(7))
    b = split_dataset(pairs, rng=np.random.default_rng(7))
    assert a == b


def test_split_too_small_rejected(rng):
    with pytest.raises(ContractError):
        split_dataset([InstructionPair(b"a", b"a"), InstructionPair(b"b", b"b")],
                      rng=rng)


def test_split_tiny_still_covers_all_slices(rng):
    train, val, test = split_dataset(gen_synthetic("copy", 3, rng), rng=rng)
    assert len(train) == len(val) == len(test) == 1


# batching ----------------------------------------------------------------------


def test_pad_batch_shapes_and_fill():
    a = encode(InstructionPair(b"a", b"b"), max_seq=16)
    b = encode(InstructionPair(b"cd", b"ef"), max_seq=16)
    tokens, valid, resp = pad_batch([a.tokens, b.tokens],
                                    [a.response_mask, b.response_mask])
    assert tokens.shape == valid.shape == resp.shape == (2, 7)
    assert tokens[0, 5] == PAD and tokens[0, 6] == PAD
    assert not valid[0, 5] and valid[1, 6]
    assert not resp[0, 5:].any()


def test_shifted_response_labels():
    tokens = np.array([[BOS, 7, SEP, 9, EOS, PAD]], dtype=np.int64)
    valid = np.array([[True] * 5 + [False]])
    resp = np.array([[False, False, False, True, True, False]])
    targets, mask = shifted_response_labels(tokens, valid, resp)
    assert targets.shape == mask.shape == (6,)
    # position t predicts token t+1: SEP predicts 9, 9 predicts EOS
    assert targets[2] == 9 and targets[3] == EOS
    assert mask.tolist() == [False, False, True, True, False, False]
