import hashlib
import http.server
import io
import json
import threading
import urllib.error
from pathlib import Path

import numpy as np
import pytest

from alsstrat.exceptions import ChecksumMismatchError, FetchError, LazNotSupportedError
from alsstrat.ingest import (
    CACHE_ENV,
    HttpBackend,
    LocalBackend,
    RetryPolicy,
    default_cache_dir,
    fetch_many,
    fetch_tile,
    list_projects,
    make_backend,
)
from alsstrat.pointcloud import parse_las
from alsstrat.sampler import ManifestEntry
from alsstrat.synthetic import make_corpus


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    return make_corpus(root, projects=3, side=1000.0, density=0.01, seed=3)


def entry(pid, bbox, epsg=32618):
    return ManifestEntry(pid, epsg, *bbox, "Forest", "Flat", 2019, "")


def test_cache_env(monkeypatch, tmp_path):
    monkeypatch.setenv(CACHE_ENV, str(tmp_path / "c"))
    assert default_cache_dir() == tmp_path / "c"


def test_list_projects(corpus, tmp_path):
    b = LocalBackend(corpus["corpus"], cache_dir=tmp_path)
    recs = list_projects(b)
    assert [r.project_id for r in recs] == ["proj00", "proj01", "proj02"]
    assert recs[0].capture_year == 2019 and recs[0].epsg == 32618
    assert recs[0].source_url.startswith("file://")
    with pytest.raises(FetchError):
        LocalBackend(tmp_path / "nope")


def test_missing_boundary_skipped(corpus, tmp_path):
    import shutil

    root = tmp_path / "c"
    shutil.copytree(corpus["corpus"], root)
    (root / "proj01" / "boundary.geojson").unlink()
    (root / "proj02" / "boundary.geojson").write_text("{not json")
    b = LocalBackend(root, cache_dir=tmp_path / "cache")
    recs = b.list_projects()
    assert [r.project_id for r in recs] == ["proj00"]
    assert len(b.warnings) == 2


def test_fetch_identity_and_cache(corpus, tmp_path):
    b = LocalBackend(corpus["corpus"], cache_dir=tmp_path)
    ext = corpus["extents"][0]
    src = parse_las((corpus["corpus"] / "proj00" / "pointcloud.las").read_bytes())
    tile, hit = b.fetch(entry("proj00", ext))
    assert not hit and len(tile) == len(src)
    assert np.array_equal(tile.xyz, src.xyz) and np.array_equal(tile.classification, src.classification)
    path, _ = b.cache_paths(entry("proj00", ext))
    first = path.read_bytes()
    tile2, hit2 = b.fetch(entry("proj00", ext))
    assert hit2 and path.read_bytes() == first and np.array_equal(tile2.xyz, tile.xyz)


def test_fetch_crops_and_rejects_outside(corpus, tmp_path):
    b = LocalBackend(corpus["corpus"], cache_dir=tmp_path)
    x0, y0 = corpus["extents"][1][:2]
    t = fetch_tile(b, entry("proj01", (x0, y0, x0 + 500, y0 + 500)))
    assert t.bounds == (x0, y0, x0 + 500, y0 + 500) and t.within_bounds()
    with pytest.raises(FetchError):
        b.fetch(entry("proj01", (0, 0, 10, 10)))
    with pytest.raises(FetchError, match="EPSG"):
        b.fetch(entry("proj01", (x0, y0, x0 + 500, y0 + 500), epsg=32617))


def test_corrupt_cache_never_served(corpus, tmp_path):
    b = LocalBackend(corpus["corpus"], cache_dir=tmp_path)
    e = entry("proj00", corpus["extents"][0])
    good, _ = b.fetch(e)
    path, _ = b.cache_paths(e)
    data = bytearray(path.read_bytes())
    data[-5] ^= 0xFF
    path.write_bytes(bytes(data))
    again, hit = b.fetch(e)
    assert not hit and np.array_equal(again.xyz, good.xyz)


def _copy_project(corpus, tmp_path, mutate):
    import shutil

    root = tmp_path / "c"
    shutil.copytree(corpus["corpus"], root)
    mutate(root / "proj00")
    return LocalBackend(root, cache_dir=tmp_path / "cache")


def test_checksum_sidecar(corpus, tmp_path):
    def good(p):
        digest = hashlib.sha256((p / "pointcloud.las").read_bytes()).hexdigest()
        (p / "pointcloud.las.sha256").write_text(f"{digest}  pointcloud.las\n")

    b = _copy_project(corpus, tmp_path / "a", good)
    assert len(b.fetch(entry("proj00", corpus["extents"][0]))[0]) > 0

    def bad(p):
        (p / "pointcloud.las.sha256").write_text("0" * 64 + "\n")

    b = _copy_project(corpus, tmp_path / "b", bad)
    with pytest.raises(ChecksumMismatchError):
        b.fetch(entry("proj00", corpus["extents"][0]))


def test_laz_rejected_and_hook(corpus, tmp_path):
    def compress(p):
        data = bytearray((p / "pointcloud.las").read_bytes())
        data[104] |= 0x80
        (p / "pointcloud.las").write_bytes(bytes(data))

    b = _copy_project(corpus, tmp_path, compress)
    with pytest.raises(LazNotSupportedError, match="decompress"):
        b.fetch(entry("proj00", corpus["extents"][0]))

    def undo(data):
        data = bytearray(data)
        data[104] &= 0x3F
        return bytes(data)

    b.decompress = undo
    assert len(b.fetch(entry("proj00", corpus["extents"][0]))[0]) > 0


def test_fetch_many_partial(corpus, tmp_path):
    b = LocalBackend(corpus["corpus"], cache_dir=tmp_path)
    es = [entry(f"proj0{k}", corpus["extents"][k]) for k in range(3)] + [entry("ghost", (0, 0, 1, 1))]
    out = fetch_many(b, es, workers=4)
    assert [o.ok for o in out] == [True, True, True, False]
    assert "ghost" in out[3].error
    serial = fetch_many(b, es[:3], workers=1)
    assert all(o.cache_hit for o in serial)


# -- HTTP -------------------------------------------------------------------


class FakeResponse(io.BytesIO):
    def __init__(self, data, status=200, fail_after=None):
        super().__init__(data)
        self.status = status
        self.headers = {"Content-Length": str(len(data))}
        self.fail_after = fail_after
        self.sent = 0

    def read(self, n=-1):
        if self.fail_after is not None and self.sent >= self.fail_after:
            raise ConnectionResetError("peer reset")
        chunk = super().read(n if n > 0 else -1)
        self.sent += len(chunk)
        return chunk


class FakeStore:
    """In-memory object store with Range support and scripted failures."""

    def __init__(self, root: Path, failures=0, cut_first_body_at=None, prefix=""):
        self.prefix = prefix
        self.files = {}
        for p in root.rglob("*"):
            if p.is_file():
                self.files[str(p.relative_to(root))] = p.read_bytes()
        self.files["index.json"] = json.dumps(sorted({k.split("/")[0] for k in self.files if "/" in k})).encode()
        self.failures = failures
        self.cut = cut_first_body_at
        self.requests = []

    def __call__(self, req, timeout=None):
        path = req.full_url.split("://", 1)[1].split("/", 1)[1]
        assert path.startswith(self.prefix)
        path = path[len(self.prefix):]
        rng = req.get_header("Range")
        self.requests.append((path, rng))
        if self.failures > 0:
            self.failures -= 1
            raise urllib.error.URLError("connection refused")
        if path not in self.files:
            raise urllib.error.HTTPError(req.full_url, 404, "not found", {}, None)
        data = self.files[path]
        if rng:
            start = int(rng.split("=")[1].rstrip("-"))
            return FakeResponse(data[start:], status=206)
        if self.cut is not None and path.endswith(".las"):
            cut, self.cut = self.cut, None
            return FakeResponse(data, fail_after=cut)
        return FakeResponse(data)


def test_http_retries_then_success(corpus, tmp_path):
    store = FakeStore(corpus["corpus"], failures=2, prefix="base/")
    sleeps = []
    b = HttpBackend("http://store.test/base", opener=store, cache_dir=tmp_path, sleep=sleeps.append,
                    retry=RetryPolicy(3, 0.5, 2.0))
    recs = b.list_projects()
    assert len(recs) == 3
    assert len(b.retries) == 2
    assert 0.45 <= sleeps[0] <= 0.55 and 0.9 <= sleeps[1] <= 1.1


def test_http_gives_up(corpus, tmp_path):
    store = FakeStore(corpus["corpus"], failures=5)
    b = HttpBackend("http://store.test/", opener=store, cache_dir=tmp_path, sleep=lambda s: None)
    with pytest.raises(FetchError, match="3 attempts"):
        b.list_projects()


def test_http_resume_with_range(corpus, tmp_path):
    store = FakeStore(corpus["corpus"], cut_first_body_at=1 << 16)
    b = HttpBackend("http://store.test/", opener=store, cache_dir=tmp_path, sleep=lambda s: None, chunk_size=1 << 14)
    t, _ = b.fetch(entry("proj00", corpus["extents"][0]))
    src = parse_las(store.files["proj00/pointcloud.las"])
    assert np.array_equal(t.xyz, src.xyz)
    las_requests = [r for r in store.requests if r[0] == "proj00/pointcloud.las"]
    assert las_requests[0][1] is None and las_requests[1][1] == f"bytes={1 << 16}-"
    assert len(b.retries) == 1


class RangeHandler(http.server.SimpleHTTPRequestHandler):
    def log_message(self, *args):
        pass

    def send_head(self):
        rng = self.headers.get("Range")
        if not rng:
            return super().send_head()
        path = self.translate_path(self.path)
        data = Path(path).read_bytes()
        start = int(rng.split("=")[1].rstrip("-"))
        self.send_response(206)
        self.send_header("Content-Length", str(len(data) - start))
        self.end_headers()
        return io.BytesIO(data[start:])


def test_real_http_server(corpus, tmp_path):
    import functools
    import shutil

    root = tmp_path / "www"
    shutil.copytree(corpus["corpus"], root)
    (root / "index.json").write_text(json.dumps({"projects": ["proj00", "proj01", "proj02"]}))
    handler = functools.partial(RangeHandler, directory=str(root))
    server = http.server.ThreadingHTTPServer(("127.0.0.1", 0), handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        b = make_backend(f"http://127.0.0.1:{server.server_address[1]}/", cache_dir=tmp_path / "cache")
        assert isinstance(b, HttpBackend)
        assert [r.project_id for r in b.list_projects()] == ["proj00", "proj01", "proj02"]
        t, hit = b.fetch(entry("proj02", corpus["extents"][2]))
        assert not hit
        src = parse_las((root / "proj02/pointcloud.las").read_bytes())
        assert np.array_equal(t.xyz, src.xyz) and np.array_equal(t.gps_time, src.gps_time)
        with pytest.raises(FetchError):
            b.fetch(entry("ghost", (0, 0, 1, 1)))
    finally:
        server.shutdown()
