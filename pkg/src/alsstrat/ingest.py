"""Resolve manifest entries to point tiles from a local corpus or over HTTP.

Corpus layout per project: ``{root}/{project_id}/boundary.geojson``,
``metadata.json`` and ``pointcloud.las`` (optionally with a
``pointcloud.las.sha256`` digest sidecar). Over HTTP the same paths are
resolved against a base URL and ``{base}/index.json`` lists project ids.
Cropped tiles are cached under a content-addressed key.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import tempfile
import threading
import time
import urllib.error
import urllib.parse
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from .exceptions import AlsStratError, ChecksumMismatchError, FetchError, GeometryError, LazNotSupportedError
from .geo import Polygon, MultiPolygon, parse_boundary_geojson
from .pointcloud import PointTile, crop, parse_las, write_las
from .sampler import ManifestEntry

log = logging.getLogger(__name__)

CACHE_ENV = "ALSSTRAT_CACHE"
DEFAULT_WORKERS = 8
BOUNDARY_FILE = "boundary.geojson"
METADATA_FILE = "metadata.json"
POINTCLOUD_FILE = "pointcloud.las"
DIGEST_SUFFIX = ".sha256"


def default_cache_dir() -> Path:
    env = os.environ.get(CACHE_ENV)
    if env:
        return Path(env)
    return Path(os.environ.get("XDG_CACHE_HOME", Path.home() / ".cache")) / "alsstrat"


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    base_delay: float = 0.5
    factor: float = 2.0
    jitter: float = 0.1

    def delay(self, attempt: int, rng: random.Random) -> float:
        """Sleep before retry number ``attempt`` (1-based)."""
        d = self.base_delay * self.factor ** (attempt - 1)
        return d * (1 + self.jitter * (2 * rng.random() - 1))


class TransientError(FetchError):
    """A failure worth retrying: connection errors, timeouts, HTTP 5xx/429."""


@dataclass
class ProjectRecord:
    project_id: str
    boundary: Polygon | MultiPolygon
    capture_year: int | None
    source_url: str
    epsg: int | None = None


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def is_laz(data: bytes) -> bool:
    return len(data) > 104 and data[:4] == b"LASF" and bool(data[104] & 0xC0)


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _parse_digest(text: str) -> str:
    token = text.strip().split()[0] if text.strip() else ""
    if len(token) != 64 or any(c not in "0123456789abcdefABCDEF" for c in token):
        raise FetchError(f"malformed sha256 sidecar {text[:80]!r}")
    return token.lower()


class Backend:
    """Shared caching and cropping; subclasses supply raw project files."""

    kind = "base"

    def __init__(
        self,
        cache_dir: str | Path | None = None,
        retry: RetryPolicy = RetryPolicy(),
        decompress: Callable[[bytes], bytes] | None = None,
        sleep: Callable[[float], None] = time.sleep,
        jitter_seed: int = 0,
    ):
        self.cache_dir = Path(cache_dir) if cache_dir is not None else default_cache_dir()
        self.retry = retry
        self.decompress = decompress
        self.sleep = sleep
        self.retries: list[dict] = []
        self.warnings: list[str] = []
        self._rng = random.Random(jitter_seed)
        self._lock = threading.Lock()
        self._source_locks: dict[str, threading.Lock] = {}

    # raw access, overridden
    def project_ids(self) -> list[str]:
        raise NotImplementedError

    def read_file(self, project_id: str, name: str, optional: bool = False) -> bytes | None:
        raise NotImplementedError

    def source_url(self, project_id: str) -> str:
        raise NotImplementedError

    def source_bytes(self, project_id: str) -> bytes:
        data = self.read_file(project_id, POINTCLOUD_FILE)
        digest = self.read_file(project_id, POINTCLOUD_FILE + DIGEST_SUFFIX, optional=True)
        if digest is not None:
            want = _parse_digest(digest.decode("ascii", "replace"))
            got = sha256_hex(data)
            if got != want:
                raise ChecksumMismatchError(f"{project_id}/{POINTCLOUD_FILE}: sha256 {got} != sidecar {want}")
        return data

    def with_retry(self, what: str, fn):
        for attempt in range(1, self.retry.max_attempts + 1):
            try:
                return fn()
            except TransientError as exc:
                if attempt == self.retry.max_attempts:
                    raise FetchError(f"{what}: giving up after {attempt} attempts: {exc}") from exc
                with self._lock:
                    delay = self.retry.delay(attempt, self._rng)
                    self.retries.append({"what": what, "attempt": attempt, "error": str(exc)})
                log.warning("retrying %s after attempt %d failed (%s); sleeping %.2fs", what, attempt, exc, delay)
                self.sleep(delay)
        raise AssertionError("unreachable")

    # projects
    def list_projects(self) -> list[ProjectRecord]:
        """Projects sorted by id; ones with a missing or bad boundary are skipped with a warning."""
        out = []
        for pid in sorted(self.project_ids()):
            try:
                raw = self.read_file(pid, BOUNDARY_FILE, optional=True)
                if raw is None:
                    raise FetchError("missing boundary.geojson")
                boundary = parse_boundary_geojson(raw)
                meta_raw = self.read_file(pid, METADATA_FILE, optional=True)
                meta = json.loads(meta_raw) if meta_raw else {}
                if not isinstance(meta, dict):
                    raise FetchError("metadata.json is not an object")
            except (FetchError, GeometryError, ValueError) as exc:
                msg = f"project {pid}: skipped ({exc})"
                log.warning(msg)
                self.warnings.append(msg)
                continue
            year = meta.get("capture_year")
            epsg = meta.get("epsg")
            out.append(ProjectRecord(pid, boundary, None if year is None else int(year), self.source_url(pid),
                                     None if epsg is None else int(epsg)))
        return out

    # tiles
    def cache_key(self, entry: ManifestEntry) -> str:
        ident = f"{entry.project_id}|{entry.epsg}|" + "|".join(f"{v:.3f}" for v in entry.bbox)
        return sha256_hex(ident.encode())[:32]

    def cache_paths(self, entry: ManifestEntry) -> tuple[Path, Path]:
        key = self.cache_key(entry)
        base = self.cache_dir / "tiles" / key[:2] / f"{key}.las"
        return base, base.with_name(base.name + DIGEST_SUFFIX)

    def _cached(self, entry) -> bytes | None:
        path, digest_path = self.cache_paths(entry)
        if not (path.exists() and digest_path.exists()):
            return None
        data = path.read_bytes()
        if sha256_hex(data) != _parse_digest(digest_path.read_text()):
            log.warning("cache entry %s failed its digest; refetching", path.name)
            path.unlink(missing_ok=True)
            digest_path.unlink(missing_ok=True)
            return None
        return data

    def _source_tile(self, project_id: str) -> PointTile:
        with self._lock:
            lock = self._source_locks.setdefault(project_id, threading.Lock())
        with lock:
            data = self.source_bytes(project_id)
        if is_laz(data):
            if self.decompress is None:
                raise LazNotSupportedError(
                    f"{project_id}: source is LAZ-compressed; pass a decompress hook or decompress it beforehand"
                )
            data = self.decompress(data)
        return parse_las(data)

    def fetch(self, entry: ManifestEntry) -> tuple[PointTile, bool]:
        """Return ``(tile, cache_hit)``."""
        cached = self._cached(entry)
        if cached is not None:
            return parse_las(cached), True
        src = self._source_tile(entry.project_id)
        if entry.epsg is not None and src.crs is not None and src.crs.epsg != entry.epsg:
            raise FetchError(f"{entry.project_id}: source EPSG:{src.crs.epsg} but manifest entry EPSG:{entry.epsg}")
        minx, miny, maxx, maxy = entry.bbox
        sx0, sy0, sx1, sy1 = src.bounds
        if minx >= sx1 or maxx <= sx0 or miny >= sy1 or maxy <= sy0:
            raise FetchError(f"{entry.project_id}: bbox {entry.bbox} lies outside the source extent {src.bounds}")
        tile = crop(src, entry.bbox, inclusive_max=(maxx >= sx1, maxy >= sy1))
        data = write_las(tile)
        path, digest_path = self.cache_paths(entry)
        _atomic_write(path, data)
        _atomic_write(digest_path, (sha256_hex(data) + "\n").encode())
        return parse_las(data), False


class LocalBackend(Backend):
    kind = "local"

    def __init__(self, root: str | Path, **kwargs):
        super().__init__(**kwargs)
        self.root = Path(root)
        if not self.root.is_dir():
            raise FetchError(f"corpus root {self.root} is not a directory")

    def project_ids(self) -> list[str]:
        return [p.name for p in self.root.iterdir() if p.is_dir() and not p.name.startswith(".")]

    def read_file(self, project_id, name, optional=False):
        path = self.root / project_id / name
        if not path.exists():
            if optional:
                return None
            raise FetchError(f"missing {path}")
        return path.read_bytes()

    def source_url(self, project_id):
        return (self.root / project_id / POINTCLOUD_FILE).resolve().as_uri()


Opener = Callable[..., object]


class HttpBackend(Backend):
    """Plain HTTP(S) object store. Point clouds stream into the cache with ranged resume."""

    kind = "http"

    def __init__(self, base_url: str, opener: Opener | None = None, timeout: float = 60.0, chunk_size: int = 1 << 20, **kwargs):
        super().__init__(**kwargs)
        self.base_url = base_url.rstrip("/") + "/"
        self.opener = opener or urllib.request.urlopen
        self.timeout = timeout
        self.chunk_size = chunk_size

    def url(self, *parts: str) -> str:
        return urllib.parse.urljoin(self.base_url, "/".join(urllib.parse.quote(p) for p in parts))

    def _open(self, url: str, headers: dict | None = None):
        req = urllib.request.Request(url, headers=headers or {})
        try:
            return self.opener(req, timeout=self.timeout)
        except urllib.error.HTTPError as exc:
            if exc.code >= 500 or exc.code == 429:
                raise TransientError(f"HTTP {exc.code} for {url}") from exc
            if exc.code == 404:
                raise FileNotFoundError(url) from exc
            raise FetchError(f"HTTP {exc.code} for {url}") from exc
        except (urllib.error.URLError, ConnectionError, TimeoutError, OSError) as exc:
            raise TransientError(f"{url}: {getattr(exc, 'reason', exc)}") from exc

    def _get(self, url: str, optional: bool = False) -> bytes | None:
        def attempt():
            try:
                resp = self._open(url)
            except FileNotFoundError:
                return None
            with resp:
                try:
                    return resp.read()
                except (ConnectionError, TimeoutError, OSError) as exc:
                    raise TransientError(f"{url}: read failed: {exc}") from exc

        data = self.with_retry(url, attempt)
        if data is None and not optional:
            raise FetchError(f"not found: {url}")
        return data

    def project_ids(self) -> list[str]:
        raw = self._get(self.url("index.json"))
        try:
            ids = json.loads(raw)
        except ValueError as exc:
            raise FetchError(f"index.json is not JSON: {exc}") from exc
        if isinstance(ids, dict):
            ids = ids.get("projects", [])
        return [str(i) for i in ids]

    def read_file(self, project_id, name, optional=False):
        if name == POINTCLOUD_FILE:
            return self._download(project_id)
        return self._get(self.url(project_id, name), optional=optional)

    def source_url(self, project_id):
        return self.url(project_id, POINTCLOUD_FILE)

    def _download(self, project_id: str) -> bytes:
        """Stream to ``sources/{project}.las``, resuming a partial ``.part`` file with a Range request."""
        final = self.cache_dir / "sources" / f"{project_id}.las"
        if final.exists():
            return final.read_bytes()
        part = final.with_name(final.name + ".part")
        part.parent.mkdir(parents=True, exist_ok=True)
        url = self.source_url(project_id)

        def attempt():
            have = part.stat().st_size if part.exists() else 0
            headers = {"Range": f"bytes={have}-"} if have else {}
            try:
                resp = self._open(url, headers)
            except FileNotFoundError:
                raise FetchError(f"not found: {url}") from None
            with resp:
                status = getattr(resp, "status", 200)
                mode = "ab" if have and status == 206 else "wb"
                try:
                    with open(part, mode) as fh:
                        while True:
                            chunk = resp.read(self.chunk_size)
                            if not chunk:
                                break
                            fh.write(chunk)
                except (ConnectionError, TimeoutError, OSError) as exc:
                    raise TransientError(f"{url}: transfer interrupted: {exc}") from exc
                expected = resp.headers.get("Content-Length") if hasattr(resp, "headers") else None
            if expected is not None and mode == "wb" and part.stat().st_size != int(expected):
                raise TransientError(f"{url}: short read ({part.stat().st_size} of {expected} bytes)")
            return True

        self.with_retry(url, attempt)
        os.replace(part, final)
        return final.read_bytes()


def make_backend(source: str, **kwargs) -> Backend:
    if source.startswith(("http://", "https://")):
        return HttpBackend(source, **kwargs)
    if source.startswith("file://"):
        source = urllib.parse.unquote(urllib.parse.urlparse(source).path)
    return LocalBackend(source, **kwargs)


def list_projects(backend: Backend) -> list[ProjectRecord]:
    return backend.list_projects()


def fetch_tile(backend: Backend, entry: ManifestEntry) -> PointTile:
    return backend.fetch(entry)[0]


@dataclass
class FetchOutcome:
    entry: ManifestEntry
    tile: PointTile | None = None
    cache_hit: bool = False
    error: str | None = None
    extra: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.error is None


def fetch_many(backend: Backend, entries: Sequence[ManifestEntry], workers: int = DEFAULT_WORKERS) -> list[FetchOutcome]:
    """Fetch entries concurrently; results come back in input order, failures captured per entry."""

    def one(entry):
        try:
            tile, hit = backend.fetch(entry)
            return FetchOutcome(entry, tile, hit)
        except (AlsStratError, OSError) as exc:
            return FetchOutcome(entry, error=f"{type(exc).__name__}: {exc}")

    if workers <= 1:
        return [one(e) for e in entries]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, entries))
