"""Deterministic synthetic corpus: documents, galleries, labels, and queries.

The generator is a ground-truth machine. Facility labels are planted as
geometric pixel motifs (one per facility id) that a template-matching oracle
recovers exactly; relevance sets are computed by brute-force scans over the
stored fields. No learned component participates in labeling.

All randomness comes from numpy's PCG64 generator seeded explicitly, a fixed,
documented algorithm whose streams are identical across platforms.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError, ParseError
from .textmodel import Vocabulary

TENSOR_MAGIC = b"HSTENSR\x00"
TENSOR_VERSION = 1

TEMPLATE_WORDS = ["in", "and", "with", "a", "hotel", "the", "rooms", "offers",
                  "guests", "enjoy", "located", "property"]
OOD_WORDS = ["seeking", "near", "please", "wanted", "stay", "accommodation",
             "ideally", "somewhere"]

QUERY_TYPES = ("multimodal", "vision-driven", "text-driven", "out-of-distribution")
SPLITS = ("train", "val", "test")


@dataclass
class CorpusConfig:
    n_docs: int = 2000
    queries_train: int = 500   # per query type
    queries_val: int = 100
    queries_test: int = 100
    image_side: int = 28
    image_window: int = 4
    n_facilities: int = 120
    n_countries: int = 12
    cities_per_country: int = 4
    facilities_min: int = 4
    facilities_max: int = 12
    advertise_prob: float = 0.35
    desc_body_len: int = 10
    landmarks_per_city: int = 3
    filler_vocab: int = 150
    gallery_mean: float = 8.0
    gallery_max: int = 306
    seed: int = 0

    def __post_init__(self):
        cells = (self.image_side // self.image_window) ** 2
        if cells * 3 < self.n_facilities:
            raise ConfigError(
                f"motif catalog too small: {cells} grid cells x 3 channels < "
                f"{self.n_facilities} facilities")
        if self.image_side % self.image_window != 0:
            raise ConfigError("image side must be divisible by window")


@dataclass
class HotelDocument:
    id: str
    country: str
    city: str
    description: list[str]        # tokens; description[0] is the country token,
                                  # description[1] the city token
    facilities: np.ndarray        # (F,) uint8
    gallery: np.ndarray | None = None  # (N, side, side, 3) pixels in [0, 1]
    gallery_path: str | None = None
    n_images: int = 0

    def load_gallery(self, root: str | Path | None = None) -> np.ndarray:
        if self.gallery is None:
            if self.gallery_path is None:
                raise InputError(f"document {self.id} has no gallery")
            path = Path(root) / self.gallery_path if root else Path(self.gallery_path)
            self.gallery = read_tensor(path)
        return self.gallery


@dataclass
class QueryRecord:
    id: str
    text: str
    qtype: str
    relevant_ids: list[str]
    split: str


# ---------------------------------------------------------------------------
# word catalogs

_CONSONANTS = "bcdfglmnprstvz"
_VOWELS = "aeiou"


def _word(rng: np.random.Generator, syllables: int) -> str:
    return "".join(
        _CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))]
        for _ in range(syllables))


def _unique_words(rng: np.random.Generator, n: int, syllables: int,
                  used: set[str], suffix: str = "") -> list[str]:
    words = []
    while len(words) < n:
        w = _word(rng, syllables) + suffix
        if w not in used:
            used.add(w)
            words.append(w)
    return words


@dataclass
class Catalogs:
    countries: list[str]
    cities: dict[str, list[str]]          # country -> cities
    city_country: dict[str, str]
    landmarks: dict[str, list[str]]       # city -> landmark words
    facility_words: list[str]             # index == facility id
    filler: list[str]


def build_catalogs(config: CorpusConfig) -> Catalogs:
    rng = np.random.default_rng(np.random.PCG64(config.seed))
    used = set(TEMPLATE_WORDS) | set(OOD_WORDS)
    countries = _unique_words(rng, config.n_countries, 3, used, suffix="ia")
    cities: dict[str, list[str]] = {}
    city_country: dict[str, str] = {}
    landmarks: dict[str, list[str]] = {}
    for country in countries:
        cities[country] = _unique_words(rng, config.cities_per_country, 2, used, suffix="ton")
        for city in cities[country]:
            city_country[city] = country
            landmarks[city] = _unique_words(rng, config.landmarks_per_city, 3, used)
    facility_words = _unique_words(rng, config.n_facilities, 3, used)
    filler = _unique_words(rng, config.filler_vocab, 2, used)
    return Catalogs(countries, cities, city_country, landmarks, facility_words, filler)


def build_vocabulary(catalogs: Catalogs) -> Vocabulary:
    tokens: list[str] = []
    tokens.extend(TEMPLATE_WORDS)
    tokens.extend(OOD_WORDS)
    tokens.extend(catalogs.countries)
    for country in catalogs.countries:
        tokens.extend(catalogs.cities[country])
        for city in catalogs.cities[country]:
            tokens.extend(catalogs.landmarks[city])
    tokens.extend(catalogs.facility_words)
    tokens.extend(catalogs.filler)
    return Vocabulary(tokens)


# ---------------------------------------------------------------------------
# motifs

_N_VARIANTS = 4


def motif_template(facility_id: int, window: int) -> np.ndarray:
    """The window x window pixel pattern planted for one facility."""
    variant = facility_id % _N_VARIANTS
    r = np.arange(window).reshape(-1, 1)
    c = np.arange(window).reshape(1, -1)
    if variant == 0:      # checkerboard
        return ((r + c) % 2).astype(np.float64)
    if variant == 1:      # horizontal stripes
        return (r % 2 == 0).astype(np.float64) * np.ones_like(c, dtype=np.float64)
    if variant == 2:      # vertical stripes
        return np.ones_like(r, dtype=np.float64) * (c % 2 == 0).astype(np.float64)
    mid = (window - 1) / 2.0  # disk
    dist2 = (r - mid) ** 2 + (c - mid) ** 2
    return (dist2 <= (window / 2.0) ** 2).astype(np.float64)


def motif_location(facility_id: int, side: int, window: int) -> tuple[int, int, int]:
    """(row offset, col offset, channel) of a facility's motif window."""
    grid = side // window
    cells = grid * grid
    cell = facility_id % cells
    channel = facility_id // cells
    return (cell // grid) * window, (cell % grid) * window, channel


def plant_motif(image: np.ndarray, facility_id: int, window: int) -> None:
    side = image.shape[0]
    r0, c0, ch = motif_location(facility_id, side, window)
    image[r0:r0 + window, c0:c0 + window, ch] = motif_template(facility_id, window)


def facility_oracle(gallery: np.ndarray, n_facilities: int, window: int,
                    tolerance: float = 0.05) -> np.ndarray:
    """Detect planted motifs by template matching; exact on generator output."""
    bits = np.zeros(n_facilities, dtype=np.uint8)
    if gallery is None or len(gallery) == 0:
        return bits
    side = gallery.shape[1]
    for fid in range(n_facilities):
        r0, c0, ch = motif_location(fid, side, window)
        template = motif_template(fid, window)
        windows = gallery[:, r0:r0 + window, c0:c0 + window, ch]
        diffs = np.abs(windows - template).mean(axis=(1, 2))
        if np.any(diffs < tolerance):
            bits[fid] = 1
    return bits


# ---------------------------------------------------------------------------
# document generation


def _sample_gallery_size(rng: np.random.Generator, config: CorpusConfig) -> int:
    n = int(rng.geometric(1.0 / config.gallery_mean))
    return max(1, min(n, config.gallery_max))


def _make_gallery(rng: np.random.Generator, config: CorpusConfig,
                  facility_ids: np.ndarray) -> np.ndarray:
    n = _sample_gallery_size(rng, config)
    side = config.image_side
    gallery = 0.2 + 0.3 * rng.random((n, side, side, 3))
    # every image of the property shows its facilities, so the gallery-mean
    # patch representation carries the motif at full strength regardless of
    # gallery size
    for fid in facility_ids:
        for j in range(n):
            plant_motif(gallery[j], int(fid), config.image_window)
    return gallery


def _make_description(rng: np.random.Generator, config: CorpusConfig,
                      catalogs: Catalogs, country: str, city: str,
                      facility_ids: np.ndarray) -> list[str]:
    advertised = [int(f) for f in facility_ids
                  if rng.random() < config.advertise_prob]
    n_landmarks = int(rng.integers(1, config.landmarks_per_city + 1))
    landmark_words = [catalogs.landmarks[city][int(i)] for i in
                      rng.choice(config.landmarks_per_city, size=n_landmarks, replace=False)]
    body: list[str] = []
    body.extend(catalogs.facility_words[f] for f in advertised)
    body.extend(landmark_words)
    while len(body) < config.desc_body_len:
        roll = rng.random()
        if roll < 0.15:
            body.append(TEMPLATE_WORDS[int(rng.integers(len(TEMPLATE_WORDS)))])
        else:
            body.append(catalogs.filler[int(rng.integers(len(catalogs.filler)))])
    order = rng.permutation(len(body))
    return [country, city] + [body[i] for i in order]


def generate_corpus(config: CorpusConfig,
                    catalogs: Catalogs | None = None) -> list[HotelDocument]:
    """Generate the full document set, deterministic under config.seed."""
    catalogs = catalogs or build_catalogs(config)
    rng = np.random.default_rng(np.random.PCG64(config.seed + 1))
    docs = []
    for i in range(config.n_docs):
        country = catalogs.countries[int(rng.integers(len(catalogs.countries)))]
        city = catalogs.cities[country][int(rng.integers(config.cities_per_country))]
        n_fac = int(rng.integers(config.facilities_min, config.facilities_max + 1))
        facility_ids = np.sort(rng.choice(config.n_facilities, size=n_fac, replace=False))
        bits = np.zeros(config.n_facilities, dtype=np.uint8)
        bits[facility_ids] = 1
        gallery = _make_gallery(rng, config, facility_ids)
        description = _make_description(rng, config, catalogs, country, city, facility_ids)
        docs.append(HotelDocument(
            id=f"d{i:05d}", country=country, city=city, description=description,
            facilities=bits, gallery=gallery, n_images=len(gallery)))
    return docs


# ---------------------------------------------------------------------------
# relevance scans (brute force, the labeling ground truth)


def scan_relevant(docs: list[HotelDocument],
                  facility_ids: list[int] | None = None,
                  city: str | None = None,
                  country: str | None = None,
                  words: list[str] | None = None) -> list[str]:
    out = []
    for doc in docs:
        if facility_ids and not all(doc.facilities[f] for f in facility_ids):
            continue
        if city is not None and doc.city != city:
            continue
        if country is not None and doc.country != country:
            continue
        if words and not all(w in doc.description[2:] for w in words):
            continue
        out.append(doc.id)
    return out


# ---------------------------------------------------------------------------
# query generation

_MAX_RETRIES = 200


def _facility_word_id(catalogs: Catalogs, word: str) -> int:
    return catalogs.facility_words.index(word)


def generate_queries(docs: list[HotelDocument], config: CorpusConfig,
                     catalogs: Catalogs) -> list[QueryRecord]:
    """Generate all four query types for all splits, deterministic under seed."""
    rng = np.random.default_rng(np.random.PCG64(config.seed + 2))
    queries: list[QueryRecord] = []
    counts = {"train": config.queries_train, "val": config.queries_val,
              "test": config.queries_test}
    dropped = 0
    for qtype in QUERY_TYPES:
        for split in SPLITS:
            made = 0
            while made < counts[split]:
                rec = None
                for _ in range(_MAX_RETRIES):
                    text, relevant = _one_query(rng, docs, config, catalogs, qtype)
                    if relevant:
                        rec = (text, relevant)
                        break
                if rec is None:
                    dropped += 1
                    warnings.warn(f"dropped a {qtype} query with no relevant documents")
                    made += 1
                    continue
                qid = f"q-{qtype}-{split}-{made:04d}"
                queries.append(QueryRecord(qid, rec[0], qtype, sorted(rec[1]), split))
                made += 1
    return queries


def _one_query(rng, docs, config, catalogs, qtype) -> tuple[str, list[str]]:
    doc = docs[int(rng.integers(len(docs)))]
    fac_ids = np.flatnonzero(doc.facilities)
    if qtype == "multimodal":
        fid = int(fac_ids[rng.integers(len(fac_ids))])
        fword = catalogs.facility_words[fid]
        if rng.random() < 0.5:
            text = f"{fword} in {doc.country}"
        else:
            text = f"hotel with {fword} in {doc.country}"
        return text, scan_relevant(docs, facility_ids=[fid], country=doc.country)
    if qtype == "vision-driven":
        if len(fac_ids) < 2:
            return "", []
        pick = rng.choice(len(fac_ids), size=2, replace=False)
        f1, f2 = int(fac_ids[pick[0]]), int(fac_ids[pick[1]])
        text = f"{catalogs.facility_words[f1]} and {catalogs.facility_words[f2]}"
        return text, scan_relevant(docs, facility_ids=[f1, f2])
    if qtype == "text-driven":
        body = doc.description[2:]
        distinct = sorted(set(w for w in body if w in set(catalogs.filler)
                              or any(w in lm for lm in catalogs.landmarks.values())))
        if len(distinct) < 2:
            return "", []
        pick = rng.choice(len(distinct), size=2, replace=False)
        words = [distinct[int(i)] for i in sorted(pick)]
        return " ".join(words), scan_relevant(docs, words=words)
    # out-of-distribution: held-out phrasings over facility + geography
    fid = int(fac_ids[rng.integers(len(fac_ids))])
    fword = catalogs.facility_words[fid]
    if rng.random() < 0.5:
        text = f"seeking a stay with {fword} near {doc.country} please"
    else:
        text = f"wanted accommodation with {fword} somewhere in {doc.country}"
    return text, scan_relevant(docs, facility_ids=[fid], country=doc.country)


# ---------------------------------------------------------------------------
# persistence


def write_tensor(path: str | Path, array: np.ndarray) -> None:
    """Binary tensor sidecar: magic, version, dtype width, shape, f64 LE payload."""
    arr = np.ascontiguousarray(array, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        header = np.array([TENSOR_VERSION, 8, arr.ndim, *arr.shape], dtype="<u4")
        fh.write(header.tobytes())
        fh.write(arr.tobytes())


def read_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(len(TENSOR_MAGIC))
        if magic != TENSOR_MAGIC:
            raise ParseError(f"{path}: bad tensor magic {magic!r}")
        fixed = np.frombuffer(fh.read(12), dtype="<u4")
        if len(fixed) != 3 or fixed[0] != TENSOR_VERSION or fixed[1] != 8:
            raise ParseError(f"{path}: unsupported tensor header")
        ndim = int(fixed[2])
        shape = tuple(int(x) for x in np.frombuffer(fh.read(4 * ndim), dtype="<u4"))
        payload = fh.read()
        expected = int(np.prod(shape)) * 8
        if len(payload) != expected:
            raise ParseError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
        return np.frombuffer(payload, dtype="<f8").reshape(shape).copy()


def save_corpus(docs: list[HotelDocument], out_dir: str | Path) -> None:
    out = Path(out_dir)
    (out / "galleries").mkdir(parents=True, exist_ok=True)
    lines = []
    for doc in docs:
        rel = f"galleries/{doc.id}.bin"
        write_tensor(out / rel, doc.gallery)
        record = {
            "id": doc.id,
            "country": doc.country,
            "city": doc.city,
            "description": " ".join(doc.description),
            "facilities": [int(i) for i in np.flatnonzero(doc.facilities)],
            "gallery": rel,
            "images": int(doc.n_images),
        }
        lines.append(json.dumps(record, sort_keys=True, separators=(",", ":")))
    (out / "corpus.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_corpus(data_dir: str | Path, n_facilities: int = 120,
                load_galleries: bool = False) -> list[HotelDocument]:
    root = Path(data_dir)
    docs = []
    text = (root / "corpus.jsonl").read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        try:
            rec = json.loads(line)
            bits = np.zeros(n_facilities, dtype=np.uint8)
            bits[rec["facilities"]] = 1
            doc = HotelDocument(
                id=rec["id"], country=rec["country"], city=rec["city"],
                description=rec["description"].split(),
                facilities=bits, gallery=None,
                gallery_path=str(root / rec["gallery"]), n_images=rec["images"])
        except (KeyError, ValueError, IndexError) as exc:
            raise ParseError(f"bad corpus record: {exc}", line=lineno) from exc
        if load_galleries:
            doc.gallery = read_tensor(root / doc.gallery_path)
        docs.append(doc)
    return docs


def save_queries(queries: list[QueryRecord], path: str | Path) -> None:
    lines = []
    for q in queries:
        lines.append(json.dumps({
            "id": q.id, "text": q.text, "qtype": q.qtype,
            "relevant_ids": q.relevant_ids, "split": q.split,
        }, sort_keys=True, separators=(",", ":")))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_queries(path: str | Path) -> list[QueryRecord]:
    queries = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(),
                                  start=1):
        try:
            rec = json.loads(line)
            queries.append(QueryRecord(rec["id"], rec["text"], rec["qtype"],
                                       list(rec["relevant_ids"]), rec["split"]))
        except (KeyError, ValueError) as exc:
            raise ParseError(f"bad query record: {exc}", line=lineno) from exc
    return queries
