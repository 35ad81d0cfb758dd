import json
import threading
from collections import Counter
from functools import lru_cache
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest
from hypothesis import given, strategies as st

from modalign.datagen import (DisCRnExample, Instance, OracleError, RemoteOracle, ReplayOracle, ScriptedOracle,
                              StubOracle, answer_spaces, balance_answers, build_discrn, dataset_stats,
                              generate_qa_pairs, generate_qa_pairs_3d, partial_similarity, strip_color)
from modalign.datagen.discrn import is_balanced
from modalign.datagen.oracle import load_transcript, parse_prompt, render
from modalign.datagen.qa import QAExample, format_question, rescan


def _indel_ratio(a, b):
    @lru_cache(None)
    def lcs(i, j):
        if i == len(a) or j == len(b):
            return 0
        return lcs(i + 1, j + 1) + 1 if a[i] == b[j] else max(lcs(i + 1, j), lcs(i, j + 1))
    return 1.0 if not a and not b else 2 * lcs(0, 0) / (len(a) + len(b))


def window_oracle(a, b):
    a, b = sorted((a.lower(), b.lower()), key=len)
    if not a:
        return 1.0 if not b else 0.0
    return max(_indel_ratio(a, b[i:i + len(a)]) for i in range(len(b) - len(a) + 1))


@pytest.mark.parametrize("a,b,expected", [("barking", "barking", 1.0), ("applaud", "applauds", 1.0),
                                          ("", "", 1.0), ("", "x", 0.0), ("Keyboard", "keyboard", 1.0)])
def test_similarity_examples(a, b, expected):
    assert partial_similarity(a, b) == expected


def test_keyboard_piano_rejected():
    s = partial_similarity("keyboard", "piano")
    assert s < 0.9
    assert s == pytest.approx(window_oracle("keyboard", "piano"))


@given(st.text("abcde ", max_size=9), st.text("abcde ", max_size=9))
def test_similarity_matches_window_oracle(a, b):
    assert partial_similarity(a, b) == pytest.approx(window_oracle(a, b))
    assert partial_similarity(a, b) == partial_similarity(b, a)


def test_format_question():
    assert format_question("what is it") == "what is it?"
    assert format_question("  What??\nextra") == "What?"
    assert format_question(" ?? ") is None


# ---------------------------------------------------------------------------
# QA mining

CAPTION = "a small dog runs across the green field while a child throws a ball"


def test_stub_round_trip_kept_with_similarity_one():
    out = generate_qa_pairs([CAPTION], StubOracle(seed=0))
    assert out
    for ex in out:
        assert ex.provenance["similarity"] == 1.0
        assert ex.provenance["roundtrip_answer"].lower() == ex.answer.lower()
        assert ex.question.endswith("?")
    assert rescan(out) == []


def test_piano_roundtrip_rejected():
    def script(kind, f, prompt):
        if kind == "answers":
            return "keyboard"
        if kind == "answer":
            return "piano"
    skipped = []
    out = generate_qa_pairs(["a woman speaks while she types on a keyboard in the office"],
                            ScriptedOracle(script), skipped=skipped)
    assert out == []
    assert "piano" in skipped[0].reason


def test_keyboard_sample_accepted():
    cap = "A woman speaks while types a keyboard"

    def script(kind, f, prompt):
        return {"answers": "Keyboard", "question": "What is the woman typing on?", "answer": "Keyboard"}.get(kind)

    out = generate_qa_pairs([cap], ScriptedOracle(script), modality="audio", min_caption_words=5)
    assert [(e.question, e.answer) for e in out] == [("What is the woman typing on?", "Keyboard")]
    assert out[0].modality == "audio"


def test_short_caption_and_multiword_answers_skipped():
    skipped = []
    assert generate_qa_pairs(["too short"], StubOracle(), skipped=skipped) == []
    assert "fewer than" in skipped[0].reason
    skipped = []
    out = generate_qa_pairs([CAPTION], ScriptedOracle(lambda k, f, p: "green field, dog" if k == "answers" else None),
                            skipped=skipped)
    assert [e.answer for e in out] == ["dog"]
    assert any("single word" in s.reason for s in skipped)


def test_oracle_failure_is_logged_not_silent(caplog):
    skipped = []
    out = generate_qa_pairs([CAPTION], ScriptedOracle(lambda k, f, p: OracleError("down")), skipped=skipped)
    assert out == [] and "oracle failure" in skipped[0].reason
    assert "oracle failure" in caplog.text


def test_strip_color():
    stub = StubOracle()
    plain = "a wooden chair with four legs"
    assert strip_color(plain, stub) == plain
    out = strip_color("a red cube on a table", stub)
    assert not set(out.lower().split()) & StubOracle.COLORS
    with pytest.raises(ValueError, match="red"):
        strip_color("a red cube", ScriptedOracle(lambda k, f, p: "a red cube"))


def test_3d_pipeline_strips_before_mining():
    stub = StubOracle()
    caps = ["a large red wooden table with four sturdy legs and a round top"]
    out = generate_qa_pairs_3d(caps, stub)
    kinds = [parse_prompt(e.prompt)[0] for e in stub.transcript]
    assert kinds[0] == "strip_color" and "strip_color" not in kinds[1:]
    assert all(e.modality == "pc3d" and "red" not in e.caption for e in out)


def test_replay_reproduces_output(tmp_path):
    stub = StubOracle(seed=3)
    first = generate_qa_pairs([CAPTION, CAPTION.replace("dog", "cat")], stub)
    stub.save_transcript(tmp_path / "t.jsonl")
    again = generate_qa_pairs([CAPTION, CAPTION.replace("dog", "cat")], ReplayOracle(tmp_path / "t.jsonl"))
    dump = lambda xs: "".join(json.dumps(x.to_json()) + "\n" for x in xs)
    assert dump(first) == dump(again)
    with pytest.raises(OracleError, match="mismatch"):
        ReplayOracle(load_transcript(tmp_path / "t.jsonl"))("something else")


def test_stub_is_pure_function_of_prompt_and_seed():
    p = render("answers", caption=CAPTION)
    assert StubOracle(1)(p) == StubOracle(1)(p)


class _Handler(BaseHTTPRequestHandler):
    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        text = "bad" if body["prompt"] == "fail" else f"echo {body['max_tokens']} {body['prompt']}\nignored"
        data = json.dumps({"text": text} if text != "bad" else {"nope": 1}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *a):
        pass


def test_remote_oracle_over_http():
    srv = HTTPServer(("127.0.0.1", 0), _Handler)
    threading.Thread(target=srv.serve_forever, daemon=True).start()
    try:
        o = RemoteOracle(f"http://127.0.0.1:{srv.server_port}/")
        assert o("hi", max_tokens=5, stop=["\n"]) == "echo 5 hi"
        assert o.transcript[0].text == "echo 5 hi"
        with pytest.raises(OracleError, match="text"):
            o("fail")
    finally:
        srv.shutdown()
    with pytest.raises(OracleError):
        RemoteOracle("http://127.0.0.1:9/", timeout=1)("x")


# ---------------------------------------------------------------------------
# DisCRn

POOL_AV = [Instance("a dog barking near a busy road", "audio", "a1"),
           Instance("rain falling on a metal roof", "audio", "a2"),
           Instance("a man playing the violin slowly", "audio", "a3")]
POOL_V = [Instance("a small red ball rolls across the floor", "video", "v1"),
          Instance("a large blue car drives down a road", "video", "v2"),
          Instance("a child jumps into a swimming pool", "video", "v3")]


def test_answer_spaces_verbatim_lists():
    first, second = answer_spaces("pc3d", "image")
    assert first == ["3d", "left", "1st", "1", "first", "input 1", "entity 1", "object 1",
                     "input A", "entity A", "object A"]
    assert second == ["image", "right", "2nd", "second", "input 2", "entity 2", "object 2",
                      "input B", "entity B", "object B"]
    same = answer_spaces("audio", "audio")
    assert "audio" not in same[0] and "audio" not in same[1]


def test_consistent_stub_pairs_survive():
    out = build_discrn(POOL_AV, POOL_V, StubOracle(), seed=0, balance=False)
    assert len(out) == 3
    for ex in out:
        assert ex.slots[0].ref != ex.slots[1].ref
        assert ex.answer_spaces == answer_spaces("audio", "video")


def test_inconsistent_pair_filtered():
    def script(kind, f, prompt):
        if kind == "pair_answer" and "violin" in f["caption_a"]:
            return "unsure"
    skipped = []
    out = build_discrn(POOL_AV, POOL_V, ScriptedOracle(script), skipped=skipped, balance=False)
    assert len(out) == 2 and all("violin" not in e.slots[0].caption for e in out)
    assert skipped[0][0] == "a3"


def test_no_self_pairs():
    out = build_discrn(POOL_AV, POOL_AV, StubOracle(), balance=False)
    assert out and all(e.slots[0].ref != e.slots[1].ref for e in out)
    skipped = []
    assert build_discrn(POOL_AV[:1], POOL_AV[:1], StubOracle(), skipped=skipped) == []
    assert skipped == [("a1", "no distinct partner")]


def make(i, idx, ma="audio", mb="video"):
    return DisCRnExample(f"q{i}?", [Instance(f"c{i}a", ma, f"r{i}a"), Instance(f"c{i}b", mb, f"r{i}b")], idx,
                         "the first one", answer_spaces(ma, mb))


def test_balance_all_first_swaps_half():
    xs = [make(i, 0) for i in range(10)]
    out = balance_answers(xs)
    assert sum(e.answer_index == 1 for e in out) == 5
    swapped = [e for e in out if e.answer_index == 1]
    assert all(e.slots[0].modality == "video" and e.answer_spaces == answer_spaces("video", "audio")
               and e.explanation == "the second one" for e in swapped)


def test_balance_is_stable():
    xs = [make(i, i % 2) for i in range(8)]
    assert balance_answers(xs) == xs


@given(st.lists(st.tuples(st.integers(0, 1), st.sampled_from([("audio", "video"), ("image", "pc3d")])),
                min_size=1, max_size=30), st.integers(0, 100))
def test_balance_per_bucket_and_content_preserved(spec, seed):
    xs = [make(i, idx, *mods) for i, (idx, mods) in enumerate(spec)]
    out = balance_answers(xs, seed)
    assert is_balanced(out)
    buckets = Counter()
    for e in out:
        buckets[e.bucket] += 1 if e.answer_index == 0 else -1
    assert all(abs(v) <= 1 for v in buckets.values())
    assert Counter(e.question for e in out) == Counter(e.question for e in xs)
    assert Counter(frozenset(s.caption for s in e.slots) for e in out) == \
        Counter(frozenset(s.caption for s in e.slots) for e in xs)
    for a, b in zip(xs, out):
        assert b.answer == a.answer or b.slots == a.slots[::-1]
        # the correct instance is unchanged
        assert b.slots[b.answer_index] == a.slots[a.answer_index]


def test_discrn_json_roundtrip():
    e = make(0, 1)
    assert DisCRnExample.from_json(json.loads(json.dumps(e.to_json()))) == e


# ---------------------------------------------------------------------------
# stats


def test_stats():
    assert dataset_stats([]) == {"size": 0, "distinct_questions": 0, "distinct_answers": 0,
                                 "avg_question_length": 0.0, "vocabulary_size": 0}
    xs = [QAExample("c", "what is it?", "dog", "image"), QAExample("c", "what is it?", "cat", "image")]
    s = dataset_stats(xs)
    assert (s["size"], s["distinct_questions"], s["distinct_answers"]) == (2, 1, 2)
    assert s["avg_question_length"] == 3.0 and s["vocabulary_size"] == 5
