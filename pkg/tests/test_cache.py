"""Digest helpers and the stage cache's hit/miss/invalidation rules."""

import json

import pytest

from histofuse import cache
from histofuse.cache import StageCache


class TestDigests:
    def test_sha256_bytes_known_value(self):
        # sha256("abc"), a published test vector
        assert cache.sha256_bytes(b"abc") == (
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        )

    def test_sha256_file_matches_bytes(self, tmp_path):
        p = tmp_path / "f.bin"
        p.write_bytes(b"hello world" * 1000)
        assert cache.sha256_file(p) == cache.sha256_bytes(b"hello world" * 1000)

    def test_digest_json_key_order_independent(self):
        assert cache.digest_json({"a": 1, "b": 2}) == cache.digest_json({"b": 2, "a": 1})
        assert cache.digest_json({"a": 1}) != cache.digest_json({"a": 2})

    def test_digest_tree_content_sensitive(self, tmp_path):
        (tmp_path / "sub").mkdir()
        (tmp_path / "a.txt").write_text("one")
        (tmp_path / "sub" / "b.txt").write_text("two")
        d1 = cache.digest_tree(tmp_path)
        assert cache.digest_tree(tmp_path) == d1  # stable
        (tmp_path / "sub" / "b.txt").write_text("TWO")
        d2 = cache.digest_tree(tmp_path)
        assert d2 != d1
        (tmp_path / "c.txt").write_text("three")
        assert cache.digest_tree(tmp_path) != d2

    def test_digest_tree_path_sensitive(self, tmp_path):
        a = tmp_path / "a"
        b = tmp_path / "b"
        a.mkdir(), b.mkdir()
        (a / "x.txt").write_text("same")
        (b / "y.txt").write_text("same")
        assert cache.digest_tree(a) != cache.digest_tree(b)


class TestStageCache:
    def _cache(self, tmp_path):
        ws = tmp_path / "ws"
        ws.mkdir(exist_ok=True)
        return StageCache(tmp_path / "markers", ws), ws

    def test_miss_then_hit(self, tmp_path):
        sc, ws = self._cache(tmp_path)
        calls = []

        def producer():
            calls.append(1)
            out = ws / "result.txt"
            out.write_text("payload bytes")
            return {"rows": 3}, [out]

        was_cached, payload, outputs = sc.run("demo", {"x": 1}, producer)
        assert not was_cached
        assert payload == {"rows": 3}
        assert outputs == ["result.txt"]
        was_cached2, payload2, outputs2 = sc.run("demo", {"x": 1}, producer)
        assert was_cached2
        assert payload2 == {"rows": 3}
        assert outputs2 == ["result.txt"]
        assert len(calls) == 1

    def test_key_change_busts_cache(self, tmp_path):
        sc, ws = self._cache(tmp_path)
        calls = []

        def make(tag):
            def producer():
                calls.append(tag)
                out = ws / f"{tag}.txt"
                out.write_text(tag)
                return tag, [out]

            return producer

        sc.run("stage", {"seed": 1}, make("a"))
        sc.run("stage", {"seed": 2}, make("b"))
        assert calls == ["a", "b"]

    def test_tampered_output_reruns(self, tmp_path):
        sc, ws = self._cache(tmp_path)
        calls = []

        def producer():
            calls.append(1)
            out = ws / "artifact.bin"
            out.write_bytes(b"fresh")
            return None, [out]

        sc.run("stage", {}, producer)
        (ws / "artifact.bin").write_bytes(b"hand-edited")
        was_cached, _, _ = sc.run("stage", {}, producer)
        assert not was_cached
        assert len(calls) == 2
        assert (ws / "artifact.bin").read_bytes() == b"fresh"

    def test_deleted_output_reruns(self, tmp_path):
        sc, ws = self._cache(tmp_path)
        calls = []

        def producer():
            calls.append(1)
            out = ws / "artifact.bin"
            out.write_bytes(b"fresh")
            return None, [out]

        sc.run("stage", {}, producer)
        (ws / "artifact.bin").unlink()
        was_cached, _, _ = sc.run("stage", {}, producer)
        assert not was_cached and len(calls) == 2

    def test_corrupt_marker_reruns(self, tmp_path):
        sc, ws = self._cache(tmp_path)
        calls = []

        def producer():
            calls.append(1)
            out = ws / "o.txt"
            out.write_text("x")
            return 1, [out]

        sc.run("stage", {}, producer)
        markers = list((tmp_path / "markers").glob("*.json"))
        assert len(markers) == 1
        markers[0].write_text("{ not json")
        was_cached, _, _ = sc.run("stage", {}, producer)
        assert not was_cached and len(calls) == 2

    def test_multi_output_stage(self, tmp_path):
        sc, ws = self._cache(tmp_path)
        (ws / "deep").mkdir()

        def producer():
            a = ws / "a.txt"
            b = ws / "deep" / "b.txt"
            a.write_text("A")
            b.write_text("B")
            return None, [b, a]

        _, _, outputs = sc.run("stage", {}, producer)
        assert outputs == ["a.txt", "deep/b.txt"]  # sorted, workspace-relative
        was_cached, _, outputs2 = sc.run("stage", {}, producer)
        assert was_cached and outputs2 == outputs

    def test_stages_do_not_collide(self, tmp_path):
        sc, ws = self._cache(tmp_path)
        runs = []

        def make(name):
            def producer():
                runs.append(name)
                out = ws / f"{name}.txt"
                out.write_text(name)
                return name, [out]

            return producer

        # same key parts, different stage names
        sc.run("extract-stub_a", {"k": 1}, make("one"))
        sc.run("extract-stub_b", {"k": 1}, make("two"))
        assert runs == ["one", "two"]

    def test_marker_filenames_are_safe(self, tmp_path):
        sc, ws = self._cache(tmp_path)

        def producer():
            out = ws / "x.txt"
            out.write_text("x")
            return None, [out]

        sc.run("Weird Stage/Name!", {}, producer)
        names = [p.name for p in (tmp_path / "markers").glob("*.json")]
        assert len(names) == 1
        assert "/" not in names[0] and " " not in names[0] and "!" not in names[0]

    def test_payload_round_trips_json_types(self, tmp_path):
        sc, ws = self._cache(tmp_path)

        def producer():
            out = ws / "x.txt"
            out.write_text("x")
            return {"list": [1, 2], "s": "text", "none": None}, [out]

        _, payload_fresh, _ = sc.run("stage", {}, producer)
        _, payload_cached, _ = sc.run("stage", {}, producer)
        assert payload_cached == payload_fresh
        # markers themselves are valid JSON lines
        marker = next((tmp_path / "markers").glob("*.json"))
        json.loads(marker.read_text())
