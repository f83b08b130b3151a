"""Stage-cached pipeline: ingest -> features -> embed -> fuse -> train-eval -> export/report.

Every cache file is stamped with a key hashed from the keys of its upstream
caches and the slice of the config the stage reads, so changing one
parameter only invalidates the stages downstream of it.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import resource
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
from filelock import FileLock, Timeout

from . import edf
from .cache import EpochTable, read_records, to_csv, write_records
from .config import PipelineConfig, config_hash
from .diffusion import affinity_matrix, diffusion_map, multiview_dm
from .errors import (
    DataError,
    InvalidParameters,
    MissingUpstream,
    TooFewPairs,
    UnsupportedSamplingRate,
    WindowOutOfBounds,
    ZeroVariance,
)
from .evaluation import SvmSettings, losocv, losocv_inductive, per_recording_metrics, per_recording_spread
from .metrics import format_table, overall_metrics, per_class_metrics
from .scattering import ScatteringExtractor
from .stages import N_STAGES, STAGE_NAMES, SleepStage
from .stats import f_test_variance, wilcoxon_signed_rank, with_bonferroni

log = logging.getLogger(__name__)

STAGES = ("ingest", "features", "embed", "fuse", "train-eval", "export", "report")
REPORT_VERSION = 1
DEFAULT_DIMS = (2, 3, 4)


class CacheLocked(DataError):
    pass


class MissingHypnogram(DataError):
    pass


@dataclass(frozen=True)
class Source:
    recording: str
    subject: str
    psg: Path
    hypnogram: Path


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def report_schema() -> dict:
    return json.loads(resources.files("diffsleep").joinpath("report.schema.json").read_text())


def _peak_rss_mb() -> float:
    # ru_maxrss is in kilobytes on Linux
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


class Pipeline:
    """One configured run over one cache directory."""

    def __init__(self, config: PipelineConfig):
        self.cfg = config
        self.cache = Path(config.cache_dir)
        self.events: list[tuple[str, str]] = []
        self.perf: dict[str, dict] = {}
        self._lock = FileLock(str(self.cache / ".lock"))

    # ------------------------------------------------------------ plumbing

    def __enter__(self):
        self.cache.mkdir(parents=True, exist_ok=True)
        try:
            self._lock.acquire(timeout=0)
        except Timeout:
            raise CacheLocked(f"cache directory {self.cache} is in use by another run") from None
        return self

    def __exit__(self, *exc):
        self._lock.release()
        return False

    def _path(self, stage: str, name: str) -> Path:
        return self.cache / stage / name

    @property
    def n_channels(self) -> int:
        return len(self.cfg.channels)

    def variants(self) -> list[str]:
        if self.n_channels == 1:
            return ["single-0"]
        return ["single-0", "single-1", "concat", "multiview"]

    @property
    def primary(self) -> str:
        return {"single": "single-0", "concat": "concat", "multiview": "multiview"}[self.cfg.fusion]

    def variant_label(self, variant: str) -> str:
        if variant.startswith("single-"):
            return self.cfg.channels[int(variant.split("-")[1])]
        return variant

    def _hit(self, path: Path, key: str):
        """Cached ``(header, table, values)`` when present and current, else None.

        A file that exists but fails its checksum raises ``CacheCorrupt``.
        """
        if not path.exists():
            return None
        header, table, values = read_records(path)
        if header.get("config_hash") != key:
            return None
        return header, table, values

    def _upstream(self, stage: str, path: Path, key: str):
        got = self._hit(path, key)
        if got is None:
            what = "missing" if not path.exists() else "stale for the current config"
            raise MissingUpstream(f"{stage} cache {path} is {what}; run '{stage}' first")
        return got

    def _record(self, stage: str, hit: bool, started: float) -> None:
        self.events.append((stage, "hit" if hit else "computed"))
        if hit:
            log.info("%s: cache hit, nothing recomputed", stage)
        entry = self.perf.setdefault(stage, {"seconds": 0.0, "cache_hit": True})
        entry["seconds"] += time.perf_counter() - started
        entry["cache_hit"] = entry["cache_hit"] and hit
        entry["peak_rss_mb"] = _peak_rss_mb()

    # ------------------------------------------------------------ keys

    def discover(self) -> list[Source]:
        ds = self.cfg.dataset
        root = Path(ds.root)
        if not root.is_dir():
            raise DataError(f"dataset root {root} does not exist")
        psgs = sorted(root.glob(ds.psg_glob))
        if not psgs:
            raise DataError(f"no files matching {ds.psg_glob!r} under {root}")
        suffix = ds.psg_glob.split("*")[-1]
        pattern = re.compile(ds.subject_pattern)
        others = sorted(p for p in root.iterdir() if p.is_file())
        out = []
        for psg in psgs:
            m = pattern.match(psg.name)
            if m is None:
                raise DataError(f"{psg.name} does not match subject pattern {ds.subject_pattern!r}")
            subject = m.group(1) if m.groups() else m.group(0)
            prefix = psg.name[: ds.match_prefix]
            hyps = [p for p in others if p.name.startswith(prefix) and p.name.endswith(tuple(ds.hypnogram_suffixes))]
            if not hyps:
                raise MissingHypnogram(f"no hypnogram for {psg.name} (prefix {prefix!r})")
            if len(hyps) > 1:
                raise MissingHypnogram(f"ambiguous hypnograms for {psg.name}: {[p.name for p in hyps]}")
            rec = psg.name[: -len(suffix)] if suffix and psg.name.endswith(suffix) else psg.stem
            out.append(Source(rec, subject, psg, hyps[0]))
        return out

    def _ingest_subset(self) -> dict:
        return self.cfg.subset("dataset", "channels", "truncation_minutes")

    def _stored_key(self, stage: str, path: Path) -> str:
        if not path.exists():
            raise MissingUpstream(f"{stage} cache {path} is missing; run '{stage}' first")
        header, _, _ = read_records(path)
        return header["config_hash"]

    def ingest_key(self) -> str:
        """Key of the current ingest cache, checked against the config."""
        path = self._path("ingest", "epochs.rec")
        self._upstream_header_check(path)
        return self._stored_key("ingest", path)

    def _upstream_header_check(self, path: Path) -> None:
        if not path.exists():
            raise MissingUpstream(f"ingest cache {path} is missing; run 'ingest' first")
        header, _, _ = read_records(path)
        if header.get("subset_hash") != config_hash(self._ingest_subset()):
            raise MissingUpstream("ingest cache is stale for the current config; run 'ingest' first")

    def features_key(self, ch: int) -> str:
        return config_hash(
            {"upstream": self.ingest_key(), "scattering": self.cfg.subset("scattering"), "channel": ch}
        )

    def _diffusion_subset(self) -> dict:
        return self.cfg.subset(
            "diffusion.t", "diffusion.dim", "diffusion.percentile", "diffusion.knn", "diffusion.knn_threshold", "seed"
        )

    def embed_key(self, ch: int) -> str:
        return config_hash({"upstream": self.features_key(ch), "diffusion": self._diffusion_subset()})

    def fuse_key(self) -> str:
        upstream = [self.embed_key(c) for c in range(self.n_channels)]
        upstream += [self.features_key(c) for c in range(self.n_channels)]
        return config_hash(
            {
                "upstream": upstream,
                "diffusion": self.cfg.subset("diffusion"),
                "seed": self.cfg.seed,
                "variants": self.variants(),
            }
        )

    def train_eval_key(self) -> str:
        return config_hash(
            {
                "upstream": self.fuse_key(),
                "svm": self.cfg.subset("svm"),
                "evaluation": self.cfg.subset("evaluation"),
                "seed": self.cfg.seed,
            }
        )

    # ------------------------------------------------------------ stages

    def ingest(self) -> EpochTable:
        started = time.perf_counter()
        sources = self.discover()
        fingerprint = [
            [s.recording, s.subject, s.psg.name, file_digest(s.psg), s.hypnogram.name, file_digest(s.hypnogram)]
            for s in sources
        ]
        subset = self._ingest_subset()
        key = config_hash({"config": subset, "files": fingerprint})
        path = self._path("ingest", "epochs.rec")
        got = self._hit(path, key)
        if got is not None:
            self._record("ingest", True, started)
            return got[1]
        rows, recs = [], []
        for src in sources:
            rec = edf.read_edf(src.psg)
            hyp = edf.parse_hypnogram(edf.load_hypnogram(src.hypnogram))
            n_slots = int(rec.duration // edf.EPOCH_SECONDS)
            labels = edf.slot_labels(hyp, n_slots)
            retained = edf.truncate_wake(labels, self.cfg.truncation_minutes)
            # validates channels, sampling rate and window bounds
            epochs = edf.extract_epochs(
                rec,
                labels,
                self.cfg.channels,
                retained=retained,
                subject_id=src.subject,
                recording_id=src.recording,
                sampling_rate=self.cfg.dataset.sampling_rate,
            )
            rows += [(e.subject_id, e.recording_id, e.epoch_index, int(e.stage)) for e in epochs]
            recs.append(
                {
                    "recording": src.recording,
                    "subject": src.subject,
                    "psg": src.psg.name,
                    "hypnogram": src.hypnogram.name,
                    "n_slots": n_slots,
                    "retained": [retained.start, retained.stop],
                    "n_scored": len(epochs),
                }
            )
            log.info("ingest %s: %d scored epochs", src.recording, len(epochs))
        table = EpochTable.from_rows(rows)
        meta = {
            "stage": "ingest",
            "config_hash": key,
            "subset_hash": config_hash(subset),
            "recordings": recs,
            "channels": list(self.cfg.channels),
        }
        write_records(path, table, None, meta)
        self._record("ingest", False, started)
        return table

    def _ingest_cache(self):
        path = self._path("ingest", "epochs.rec")
        self._upstream_header_check(path)
        header, table, _ = read_records(path)
        return header, table

    def _windows(self, header: dict, table: EpochTable, channel: str):
        fs = self.cfg.dataset.sampling_rate
        fsi = int(round(fs))
        width = edf.WINDOW_SECONDS * fsi
        root = Path(self.cfg.dataset.root)
        for info in header["recordings"]:
            mask = table.recordings == info["recording"]
            rec = edf.read_edf(root / info["psg"])
            idx = rec.channel_index(channel)
            if abs(rec.sampling_rate(idx) - fs) > 1e-9:
                raise UnsupportedSamplingRate(f"{info['psg']}: {channel!r} is not sampled at {fs} Hz")
            sig = rec.signals[idx]
            for slot in table.epoch_index[mask]:
                start = (int(slot) * edf.EPOCH_SECONDS - edf.CONTEXT_SECONDS) * fsi
                if start < 0 or start + width > len(sig):
                    raise WindowOutOfBounds(f"{info['psg']}: slot {slot} window exceeds the signal")
                yield sig[start : start + width]

    def features(self) -> list[np.ndarray]:
        out = []
        header = table = None
        sc = self.cfg.scattering
        for ch, name in enumerate(self.cfg.channels):
            started = time.perf_counter()
            key = self.features_key(ch)
            path = self._path("features", f"channel-{ch}.rec")
            got = self._hit(path, key)
            if got is not None:
                self._record("features", True, started)
                out.append(got[2])
                continue
            if header is None:
                header, table = self._ingest_cache()
            extractor = ScatteringExtractor(
                n_samples=edf.WINDOW_SECONDS * int(round(self.cfg.dataset.sampling_rate)),
                Q=sc.Q,
                H=sc.H,
                include_lowpass=sc.include_lowpass,
            )
            windows = self._windows(header, table, name)
            if self.cfg.threads > 1:
                with ThreadPoolExecutor(self.cfg.threads) as pool:
                    rows = list(pool.map(extractor, windows))
            else:
                rows = [extractor(w) for w in windows]
            values = np.asarray(rows, dtype=np.float32).reshape(len(table), extractor.dim)
            meta = {"stage": "features", "config_hash": key, "channel": name, "scattering": extractor.header()}
            write_records(path, table, values, meta)
            log.info("features %s: %d x %d", name, *values.shape)
            self._record("features", False, started)
            out.append(values)
        return out

    def _graph(self, X: np.ndarray):
        d = self.cfg.diffusion
        knn = d.knn if len(X) > d.knn_threshold else None
        return affinity_matrix(X, d.percentile, knn=knn, seed=self.cfg.seed)

    def _check_dim(self, dim: int, J: int, name: str) -> None:
        if not 1 <= dim <= J - 1:
            raise InvalidParameters(f"diffusion.{name} = {dim} must lie in [1, {J - 1}] for {J} epochs")

    def embed_channel(self, X: np.ndarray):
        d = self.cfg.diffusion
        self._check_dim(d.dim, len(X), "dim")
        graph = self._graph(X)
        return graph, diffusion_map(graph, d.t, d.dim, seed=self.cfg.seed)

    def embed(self) -> list[np.ndarray]:
        out = []
        for ch, name in enumerate(self.cfg.channels):
            started = time.perf_counter()
            key = self.embed_key(ch)
            path = self._path("embed", f"channel-{ch}.rec")
            got = self._hit(path, key)
            if got is not None:
                self._record("embed", True, started)
                out.append(got[2])
                continue
            _, table, X = self._upstream("features", self._path("features", f"channel-{ch}.rec"), self.features_key(ch))
            graph, emb = self.embed_channel(X.astype(np.float64))
            meta = {
                "stage": "embed",
                "config_hash": key,
                "channel": name,
                "epsilon": graph.epsilon,
                "sparse": graph.sparse,
                "eigenvalues": emb.eigenvalues.tolist(),
            }
            coords = emb.coordinates
            write_records(path, table, coords, meta, dtype="<f8")
            self._record("embed", False, started)
            out.append(coords)
        return out

    def fuse_views(self, coords: list[np.ndarray], feats: list[np.ndarray] | None) -> dict[str, tuple[np.ndarray, dict]]:
        """Feature matrix of every variant from per-channel coordinates."""
        d = self.cfg.diffusion
        out = {}
        for ch in range(len(coords)):
            out[f"single-{ch}"] = (coords[ch], {"halves": 1, "half_dim": coords[ch].shape[1]})
        if len(coords) == 2:
            out["concat"] = (np.hstack(coords), {"halves": 2, "half_dim": coords[0].shape[1]})
            inputs = coords if d.multiview_input == "embedding" else feats
            J = len(inputs[0])
            self._check_dim(d.common_dim, J, "common_dim")
            gx, gy = self._graph(inputs[0]), self._graph(inputs[1])
            common = multiview_dm(gx, gy, d.t, d.common_dim, seed=self.cfg.seed)
            out["multiview"] = (
                common.features,
                {"halves": 2, "half_dim": common.dim, "eigenvalues": common.eigenvalues.tolist()},
            )
        return out

    def fuse(self) -> dict[str, np.ndarray]:
        started = time.perf_counter()
        key = self.fuse_key()
        paths = {v: self._path("fuse", f"{v}.rec") for v in self.variants()}
        hits = {v: self._hit(p, key) for v, p in paths.items()}
        if all(h is not None for h in hits.values()):
            self._record("fuse", True, started)
            return {v: h[2] for v, h in hits.items()}
        coords, table = [], None
        for ch in range(self.n_channels):
            _, table, c = self._upstream("embed", self._path("embed", f"channel-{ch}.rec"), self.embed_key(ch))
            coords.append(c)
        feats = None
        if self.n_channels == 2 and self.cfg.diffusion.multiview_input == "features":
            feats = [
                self._upstream("features", self._path("features", f"channel-{ch}.rec"), self.features_key(ch))[2].astype(np.float64)
                for ch in range(2)
            ]
        fused = self.fuse_views(coords, feats)
        out = {}
        for v in self.variants():
            values, info = fused[v]
            meta = {"stage": "fuse", "config_hash": key, "variant": v, "label": self.variant_label(v), **info}
            write_records(paths[v], table, values, meta, dtype="<f8")
            out[v] = values
        self._record("fuse", False, started)
        return out

    def _svm_settings(self) -> SvmSettings:
        s = self.cfg.svm
        sigma = None if s.sigma == "median" else float(s.sigma)
        return SvmSettings(C=s.C, sigma=sigma, solver=s.solver, tol=s.tol, standardize=s.standardize)

    def _inductive_embed(self, variant: str):
        def embed(views):
            coords = [self.embed_channel(v)[1].coordinates for v in views]
            return self.fuse_views(coords, views)[variant][0]

        return embed

    def train_eval(self) -> dict:
        started = time.perf_counter()
        key = self.train_eval_key()
        path = self._path("train-eval", "results.rec")
        got = self._hit(path, key)
        if got is not None:
            self._record("train-eval", True, started)
            return got[0]
        fused, table = {}, None
        fkey = self.fuse_key()
        for v in self.variants():
            _, table, values = self._upstream("fuse", self._path("fuse", f"{v}.rec"), fkey)
            fused[v] = values
        ev = self.cfg.evaluation
        svm = self._svm_settings()
        kwargs = dict(svm=svm, balanced=ev.balanced, seed=self.cfg.seed, n_jobs=self.cfg.threads)
        feats = None
        if ev.protocol == "inductive":
            feats = [
                self._upstream("features", self._path("features", f"channel-{ch}.rec"), self.features_key(ch))[2].astype(np.float64)
                for ch in range(self.n_channels)
            ]
        preds, results = [], {}
        for v in self.variants():
            if ev.protocol == "inductive":
                views = feats if v in ("concat", "multiview") else [feats[int(v.split("-")[1])]]
                res = losocv_inductive(
                    views, table.stages, table.subjects, self._inductive_embed(v if len(views) == 2 else "single-0"),
                    table.recordings, **kwargs,
                )
            else:
                res = losocv(fused[v], table.stages, table.subjects, table.recordings, **kwargs)
            log.info("train-eval %s: pooled ACC %.4f", v, res.metrics.accuracy)
            preds.append(res.predicted)
            results[v] = {"folds": [f.as_dict() for f in res.folds], "pooled": res.pooled.tolist()}
        meta = {"stage": "train-eval", "config_hash": key, "variants": self.variants(), "results": results}
        write_records(path, table, np.stack(preds, axis=1).astype(np.float32), meta)
        self._record("train-eval", False, started)
        return meta

    def _train_eval_cache(self):
        return self._upstream("train-eval", self._path("train-eval", "results.rec"), self.train_eval_key())

    # ------------------------------------------------------------ outputs

    def export_embedding(self, dims=DEFAULT_DIMS, variant: str | None = None) -> Path:
        """CSV of diffusion coordinates ``dims`` (1-based eigenpair indices, 2 = first non-trivial)."""
        variant = variant or self.primary
        if variant not in self.variants():
            raise InvalidParameters(f"unknown variant {variant!r}; choose from {self.variants()}")
        path = self._path("fuse", f"{variant}.rec")
        if path.exists():
            header, table, values = self._upstream("fuse", path, self.fuse_key())
            halves, half_dim = header["halves"], header["half_dim"]
        elif variant.startswith("single-"):
            ch = int(variant.split("-")[1])
            header, table, values = self._upstream("embed", self._path("embed", f"channel-{ch}.rec"), self.embed_key(ch))
            halves, half_dim = 1, values.shape[1]
        else:
            raise MissingUpstream(f"no fuse or embed cache for {variant!r}; run 'fuse' first")
        dims = [int(d) for d in dims]
        bad = [d for d in dims if not 2 <= d <= half_dim + 1]
        if bad or not dims:
            raise InvalidParameters(f"dims {bad or dims} out of range; valid coordinates are 2..{half_dim + 1}")
        cols, names = [], []
        for h in range(halves):
            tag = "" if halves == 1 else ("x_", "y_")[h]
            for d in dims:
                cols.append(h * half_dim + d - 2)
                names.append(f"{tag}q{d}")
        out = self.cfg.out_dir / f"embedding_{variant}.csv"
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(to_csv(table, values[:, cols], names))
        return out

    def export_hypnograms(self) -> Path:
        header, table, preds = self._train_eval_cache()
        col = header["variants"].index(self.primary)
        lines = ["subject,recording,epoch_index,true_stage,predicted_stage"]
        for i in range(len(table)):
            lines.append(
                f"{table.subjects[i]},{table.recordings[i]},{int(table.epoch_index[i])},"
                f"{SleepStage(int(table.stages[i])).short},{SleepStage(int(preds[i, col])).short}"
            )
        out = self.cfg.out_dir / f"hypnogram_{self.primary}.csv"
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text("\n".join(lines) + "\n")
        return out

    def export(self, dims=None, variant: str | None = None) -> list[Path]:
        """Embedding CSV plus, after train-eval, the hypnogram CSV.

        Explicit ``dims`` are checked strictly; the default ``2, 3, 4`` is
        clipped to the coordinates available.
        """
        started = time.perf_counter()
        variant = variant or self.primary
        if dims is None:
            path = self._path("fuse", f"{variant}.rec")
            half = read_records(path)[0]["half_dim"] if path.exists() else None
            dims = [d for d in DEFAULT_DIMS if half is None or d <= half + 1]
        paths = [self.export_embedding(dims, variant)]
        if self._path("train-eval", "results.rec").exists():
            paths.append(self.export_hypnograms())
        self._record("export", False, started)
        return paths

    def _variant_report(self, v: str, col: int, header: dict, table: EpochTable, preds: np.ndarray) -> dict:
        pooled = np.asarray(header["results"][v]["pooled"], dtype=np.int64)
        per_rec = per_recording_metrics(table.stages, preds[:, col].astype(np.int64), table.recordings)
        cls = per_class_metrics(pooled)
        return {
            "label": self.variant_label(v),
            "pooled": {
                "confusion": pooled.tolist(),
                "metrics": overall_metrics(pooled).as_dict(),
                "per_class": cls.as_dict(),
                "table": format_table(pooled),
            },
            "folds": header["results"][v]["folds"],
            "per_recording": per_rec,
            "per_recording_spread": per_recording_spread(per_rec),
        }

    def _ablation(self, results: dict) -> dict:
        """Multiview against every other variant on per-recording scores."""
        alpha = self.cfg.evaluation.alpha
        baselines = [v for v in self.variants() if v != "multiview"]
        metrics = ("accuracy", "macro_f1", "kappa")
        recs = sorted(results["multiview"]["per_recording"])
        comparisons, wil, fts = [], [], []
        for b in baselines:
            for m in metrics:
                mv = [results["multiview"]["per_recording"][r][m] for r in recs]
                base = [results[b]["per_recording"][r][m] for r in recs]
                entry = {"baseline": b, "baseline_label": self.variant_label(b), "metric": m}
                try:
                    w = wilcoxon_signed_rank(mv, base, "greater")
                    wil.append((len(comparisons), w))
                except TooFewPairs as exc:
                    entry["wilcoxon_skipped"] = str(exc)
                try:
                    f = f_test_variance(base, mv, "greater")
                    fts.append((len(comparisons), f))
                except ZeroVariance as exc:
                    entry["f_test_skipped"] = str(exc)
                comparisons.append(entry)
        for family, name in ((wil, "wilcoxon"), (fts, "f_test")):
            adjusted = with_bonferroni([r for _, r in family], alpha)
            for (i, raw), adj in zip(family, adjusted):
                d = adj.as_dict()
                d["significant_uncorrected"] = bool(raw.p_value < alpha)
                comparisons[i][name] = d
        return {
            "unit": "recording",
            "alpha": alpha,
            "n_recordings": len(recs),
            "pooled_accuracy": {v: results[v]["pooled"]["metrics"]["accuracy"] for v in self.variants()},
            "comparisons": comparisons,
        }

    def build_report(self) -> dict:
        header, table, preds = self._train_eval_cache()
        results = {v: self._variant_report(v, i, header, table, preds) for i, v in enumerate(header["variants"])}
        cfg = self.cfg.model_dump(mode="json")
        for k in ("cache_dir", "output_dir", "threads"):
            cfg.pop(k)
        cfg["dataset"].pop("root")
        counts = np.bincount(table.stages.astype(np.int64), minlength=N_STAGES)[:N_STAGES]
        report = {
            "report_version": REPORT_VERSION,
            "config": cfg,
            "dataset": {
                "n_subjects": int(len(np.unique(table.subjects))),
                "n_recordings": int(len(np.unique(table.recordings))),
                "n_epochs": int(len(table)),
                "stage_counts": {n: int(c) for n, c in zip(STAGE_NAMES, counts)},
            },
            "primary": self.primary,
            "results": results,
        }
        if self.n_channels == 2:
            report["ablation"] = self._ablation(results)
        jsonschema.validate(report, report_schema())
        return report

    def report(self) -> Path:
        started = time.perf_counter()
        report = self.build_report()
        out = self.cfg.out_dir
        out.mkdir(parents=True, exist_ok=True)
        path = out / "report.json"
        path.write_text(json.dumps(report, indent=2, sort_keys=True, allow_nan=False) + "\n")
        for v, res in report["results"].items():
            lines = ["stage," + ",".join(STAGE_NAMES) + ",PR,RE,F1"]
            for row in res["pooled"]["table"]:
                cells = [f"{c} ({p:.0f}%)" for c, p in zip(row["counts"], row["row_percent"])]
                lines.append(",".join([row["stage"], *cells, f"{row['PR']:.0f}", f"{row['RE']:.0f}", f"{row['F1']:.0f}"]))
            (out / f"table_{v}.csv").write_text("\n".join(lines) + "\n")
        self._record("report", False, started)
        (out / "perf.json").write_text(json.dumps(self.perf, indent=2, sort_keys=True) + "\n")
        return path

    # ------------------------------------------------------------ driver

    def run(self, stage: str, **kwargs):
        if stage not in STAGES and stage != "all":
            raise InvalidParameters(f"unknown stage {stage!r}")
        if stage == "all":
            self.ingest()
            self.features()
            self.embed()
            self.fuse()
            self.train_eval()
            self.export(**kwargs)
            return self.report()
        fn = {
            "ingest": self.ingest,
            "features": self.features,
            "embed": self.embed,
            "fuse": self.fuse,
            "train-eval": self.train_eval,
            "export": self.export,
            "report": self.report,
        }[stage]
        return fn(**kwargs) if stage == "export" else fn()


def run_stage(stage: str, config: PipelineConfig, **kwargs):
    """Run one stage (or ``"all"``) with the cache directory locked."""
    with Pipeline(config) as p:
        return p.run(stage, **kwargs)
