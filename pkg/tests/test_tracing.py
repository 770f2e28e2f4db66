"""Event trace recording and file round trips."""

import threading

from toolloop.tracing import Trace, count_events


class TestTrace:
    def test_seq_is_dense_and_ordered(self):
        trace = Trace()
        trace.record("a", "tool", "created")
        trace.record("b", "meta", "finish")
        assert [e.seq for e in trace.events] == [0, 1]

    def test_filter(self):
        trace = Trace()
        trace.record("a", "tool", "resume")
        trace.record("b", "category", "resume")
        trace.record("a", "tool", "finish")
        assert len(trace.filter(event="resume")) == 2
        assert len(trace.filter(event="resume", kind="tool")) == 1
        assert count_events(trace.events, "finish") == 1

    def test_jsonl_round_trip(self, tmp_path):
        trace = Trace()
        trace.record("a", "tool", "pool_add", accepted=2, pool_size=5)
        trace.record("run", "system", "stop", reason="solvable")
        path = tmp_path / "trace.jsonl"
        trace.write_jsonl(str(path))
        loaded = Trace.read_jsonl(str(path))
        assert [e.to_payload() for e in loaded] == [
            e.to_payload() for e in trace.events
        ]

    def test_concurrent_appends_unique_seq(self):
        trace = Trace()

        def spam():
            for _ in range(500):
                trace.record("x", "tool", "model_call")

        threads = [threading.Thread(target=spam) for _ in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        seqs = [e.seq for e in trace.events]
        assert sorted(seqs) == list(range(4000))
