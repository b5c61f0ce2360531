"""Experiment orchestration: data, backbone, artifacts, grid evaluation and reports.

Every trained artifact and every evaluated cell lives in a directory named by a
digest of exactly the inputs that determine it, so reruns find their earlier
work and skip it.
"""

from __future__ import annotations

import json
import logging
import math
import multiprocessing
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import torch

from . import checkpoint as ckpt
from .config import BUILTIN_BACKBONE, ExperimentConfig, LanguageSpec, TaskSpec, digest
from .data import (TextToTextExample, corpus_examples, instruction_for, load_dataset, save_dataset,
                   split_train_val, synth_copy_task, synth_corpus)
from .evaluation import (EvalResult, GridSpec, PRIMARY_METRIC, TransferMatrix, aggregate_seeds, evaluate,
                         improvement_heatmap, read_results, relative_improvement, summarize, transfer_matrix,
                         write_heatmap, write_results)
from .model import TinyTransformer
from .peft import LANGUAGE, Variant, assemble, baseline, init_soft_prompt
from .training import (TrainingDivergedError, TrainingHyperparams, load_backbone, load_best,
                       new_language_artifact, new_task_artifact, pretrain_backbone, save_backbone,
                       train_language_representation, train_task_representation)

log = logging.getLogger(__name__)

BACKBONE_RESOURCE = "backbone.pwck"


def builtin_backbone_path() -> Path:
    return Path(str(resources.files("peftweave") / "assets" / BACKBONE_RESOURCE))


def _is_complete(run_dir: Path) -> bool:
    return (run_dir / "run.json").is_file() and (run_dir / "best.pwck").is_file()


@dataclass
class InvocationStats:
    training_steps: int = 0
    runs_trained: int = 0
    runs_skipped: int = 0
    cells_evaluated: int = 0
    cells_cached: int = 0
    absent: List[str] = field(default_factory=list)

    def merge(self, other: "InvocationStats"):
        self.training_steps += other.training_steps
        self.runs_trained += other.runs_trained
        self.runs_skipped += other.runs_skipped
        self.absent.extend(other.absent)


class Experiment:
    def __init__(self, cfg: ExperimentConfig, out_dir=None, force: bool = False, jobs: int = 1):
        self.cfg = cfg
        self.out = Path(out_dir or cfg.resolve(cfg.output_dir))
        self.force = force
        self.jobs = max(1, jobs)
        self.stats = InvocationStats()
        self._backbone: Optional[TinyTransformer] = None
        self._forced: set = set()

    # -- bookkeeping ---------------------------------------------------------------

    def _claim(self, run_dir: Path) -> bool:
        """True when ``run_dir`` already holds a finished run that may be reused."""
        if self.force and run_dir not in self._forced:
            self._forced.add(run_dir)
            if run_dir.exists():
                shutil.rmtree(run_dir)
            return False
        return _is_complete(run_dir)

    # -- data ----------------------------------------------------------------------

    def corpus_id(self, lang: LanguageSpec) -> dict:
        if lang.profile is not None:
            return {"profile": lang.profile.to_dict(), "size": lang.corpus_size}
        text = self.cfg.resolve(lang.corpus).read_bytes()
        return {"file": digest(text.decode("utf-8", "replace"))}

    def corpus(self, name: str) -> List[str]:
        lang = self.cfg.language(name)
        if lang.profile is None:
            lines = self.cfg.resolve(lang.corpus).read_text(encoding="utf-8").splitlines()
            return [l for l in (x.strip() for x in lines) if l][: lang.corpus_size]
        path = self.out / "corpora" / f"{name}.jsonl"
        if not path.is_file() or path in self._forced:
            path.parent.mkdir(parents=True, exist_ok=True)
            save_dataset(corpus_examples(synth_corpus(lang.profile, lang.corpus_size, seed=0), name), path)
        return [e.input_text for e in load_dataset(path)]

    def task_data_id(self, task: TaskSpec, lang: str) -> dict:
        if task.synth is not None:
            return {"synth": task.synth, "profile": self.cfg.language(lang).profile.to_dict(),
                    "train": task.train_size, "test": task.test_size, "val": self.cfg.val_fraction}
        return {p: digest(self.cfg.resolve(task.data[lang][p]).read_text()) for p in ("train", "test")} | \
            {"val": self.cfg.val_fraction}

    def task_data(self, task_name: str, lang: str) -> Tuple[list, list, list]:
        """(train, val, test) examples for one task in one language."""
        task = self.cfg.task(task_name)
        if task.synth is not None:
            profile = self.cfg.language(lang).profile
            if profile is None:
                raise ValueError(f"synthetic task {task_name!r} needs a synthetic language, {lang!r} is not")
            d = self.out / "data" / task_name / lang
            if not (d / "test.jsonl").is_file():
                d.mkdir(parents=True, exist_ok=True)
                pool = synth_copy_task(profile, task.train_size, seed=101)
                save_dataset(pool, d / "train_pool.jsonl")
                save_dataset(synth_copy_task(profile, task.test_size, seed=202), d / "test.jsonl")
            pool = load_dataset(d / "train_pool.jsonl")
            test = load_dataset(d / "test.jsonl")
        else:
            pool = load_dataset(self.cfg.resolve(task.data[lang]["train"]))
            test = load_dataset(self.cfg.resolve(task.data[lang]["test"]))
        train, val = split_train_val(pool, self.cfg.val_fraction, seed=0)
        if not val:
            val = train[:1]
        return train, val, test

    def synth(self):
        for lang in self.cfg.languages:
            self.corpus(lang.name)
        for task in self.cfg.tasks:
            for lang in self.cfg.languages:
                self.task_data(task.name, lang.name)

    # -- backbone ------------------------------------------------------------------------

    def backbone_id(self) -> dict:
        spec = self.cfg.backbone
        if spec.path == BUILTIN_BACKBONE:
            return {"builtin": digest(ckpt.read_manifest(builtin_backbone_path())[1])}
        if spec.path is not None:
            return {"file": str(self.cfg.resolve(spec.path))}
        return {"pretrain": asdict(spec), "model": self.cfg.model.to_dict(),
                "corpora": [self.corpus_id(l) for l in self.cfg.languages]}

    def backbone_path(self) -> Path:
        spec = self.cfg.backbone
        if spec.path == BUILTIN_BACKBONE:
            return builtin_backbone_path()
        if spec.path is not None:
            return self.cfg.resolve(spec.path)
        return self.out / "backbone" / f"{digest(self.backbone_id())}.pwck"

    def pretrain(self) -> Path:
        path = self.backbone_path()
        spec = self.cfg.backbone
        if spec.path is None and (not path.is_file() or self.force and path not in self._forced):
            self._forced.add(path)
            path.parent.mkdir(parents=True, exist_ok=True)
            corpora = {l.name: synth_corpus(l.profile, spec.corpus_size, seed=spec.seed + 1)
                       if l.profile is not None else self.corpus(l.name) for l in self.cfg.languages}
            model = pretrain_backbone(self.cfg.model, corpora, spec.pretrain_steps, spec.learning_rate,
                                      spec.batch_size, spec.seed)
            self.stats.training_steps += spec.pretrain_steps
            save_backbone(model, path, {"recipe": self.backbone_id()})
        return path

    def backbone(self) -> TinyTransformer:
        if self._backbone is None:
            self._backbone = load_backbone(self.pretrain())
            if self._backbone.cfg.to_dict() != self.cfg.model.to_dict():
                raise ValueError(f"backbone at {self.backbone_path()} has config {self._backbone.cfg.to_dict()}, "
                                 f"experiment asks for {self.cfg.model.to_dict()}")
        return self._backbone

    # -- language representations ----------------------------------------------------------

    def _hp(self, phase: str, seed: int) -> TrainingHyperparams:
        return TrainingHyperparams(**{**self.cfg.hyperparams[phase].to_dict(), "seed": seed,
                                      "max_input_length": self.cfg.model.max_input_length})

    def lang_run_id(self, lang: str, kind: str, seed: int) -> str:
        return digest({"backbone": self.backbone_id(), "kind": kind, "language": lang,
                       "instruction": self.cfg.language(lang).instruction,
                       "corpus": self.corpus_id(self.cfg.language(lang)),
                       "hp": self._hp(f"language_{kind}", seed).to_dict(),
                       "prompt_tokens": self.cfg.prompt_tokens, "bottleneck": self.cfg.bottleneck})

    def lang_run_dir(self, lang: str, kind: str, seed: int) -> Path:
        return self.out / "runs" / f"lang-{kind}-{lang}-{self.lang_run_id(lang, kind, seed)}"

    def _new_lang_artifact(self, lang: str, kind: str, seed: int):
        if kind == "prompt":
            return init_soft_prompt(instruction_for(self.cfg.language(lang).instruction, lang),
                                    self.cfg.prompt_tokens, self.backbone().embed.weight, role=LANGUAGE)
        return new_language_artifact(self.backbone(), kind, lang, bottleneck=self.cfg.bottleneck, seed=seed)

    def train_lang(self, lang: str, kind: str, seed: int) -> Path:
        run_dir = self.lang_run_dir(lang, kind, seed)
        if self._claim(run_dir):
            self.stats.runs_skipped += 1
            return run_dir
        art = self._new_lang_artifact(lang, kind, seed)
        run = train_language_representation(self.backbone(), art, self.corpus(lang), self._hp(f"language_{kind}", seed),
                                            run_dir)
        self.stats.training_steps += run.steps_executed
        self.stats.runs_trained += 1
        return run_dir

    def load_lang(self, lang: str, kind: str, seed: int, train: bool = True):
        run_dir = self.train_lang(lang, kind, seed) if train else self.lang_run_dir(lang, kind, seed)
        if not _is_complete(run_dir):
            return None
        art = self._new_lang_artifact(lang, kind, seed)
        load_best(run_dir, assemble(self.backbone(), Variant.LANG_ADAPTER if kind == "adapter" else Variant.LANG_PROMPT,
                                    language=art))
        return art

    # -- task representations ----------------------------------------------------------------

    def task_run_id(self, task: str, variant: Variant, source: str, seed: int) -> str:
        lang_dep = None
        if variant.language_kind is not None:
            lang_dep = self.lang_run_id(source, variant.language_kind, seed)
        spec = self.cfg.task(task)
        return digest({"backbone": self.backbone_id(), "task": spec.to_dict(), "variant": variant.value,
                       "source": source, "data": self.task_data_id(spec, source), "language_run": lang_dep,
                       "hp": self._hp(f"task_{variant.task_kind}", seed).to_dict(),
                       "prompt_tokens": self.cfg.prompt_tokens, "bottleneck": self.cfg.bottleneck})

    def task_run_dir(self, task: str, variant: Variant, source: str, seed: int) -> Path:
        return self.out / "runs" / f"task-{task}-{variant.name.lower()}-{source}-{self.task_run_id(task, variant, source, seed)}"

    def _new_task_artifact(self, task: str, variant: Variant, source: str, seed: int):
        instruction = instruction_for(self.cfg.task(task).instruction, source)
        return new_task_artifact(self.backbone(), variant, instruction, self.cfg.prompt_tokens, self.cfg.bottleneck,
                                 seed=seed)

    def train_task(self, task: str, variant: Variant, source: str, seed: int) -> Path:
        run_dir = self.task_run_dir(task, variant, source, seed)
        if self._claim(run_dir):
            self.stats.runs_skipped += 1
            return run_dir
        lang_art = None
        if variant.language_kind is not None:
            lang_art = self.load_lang(source, variant.language_kind, seed)
        train, val, _ = self.task_data(task, source)
        run = train_task_representation(self.backbone(), variant, self._new_task_artifact(task, variant, source, seed),
                                        train, val, self._hp(f"task_{variant.task_kind}", seed), run_dir, lang_art)
        self.stats.training_steps += run.steps_executed
        self.stats.runs_trained += 1
        return run_dir

    def load_task(self, task: str, variant: Variant, source: str, seed: int):
        run_dir = self.task_run_dir(task, variant, source, seed)
        if not _is_complete(run_dir):
            return None
        art = self._new_task_artifact(task, variant, source, seed)
        lang_art = None
        if variant.language_kind is not None:
            lang_art = self._new_lang_artifact(source, variant.language_kind, seed)
        load_best(run_dir, assemble(self.backbone(), variant, language=lang_art, task=art))
        return art

    # -- scheduling --------------------------------------------------------------------------------

    def language_jobs(self, seeds: Sequence[int]) -> List[Tuple[str, str, int]]:
        kinds = sorted({v.language_kind for v in self.cfg.configurations if v.language_kind})
        return [(l.name, k, s) for s in seeds for k in kinds for l in self.cfg.languages]

    def task_jobs(self, seeds: Sequence[int]) -> List[Tuple[str, Variant, str, int]]:
        return [(t.name, v, l.name, s) for s in seeds for t in self.cfg.tasks for v in self.cfg.configurations
                for l in self.cfg.languages]

    def train_all(self, seeds: Sequence[int]):
        """Train every language then task representation the grid needs."""
        self.pretrain()
        self.synth()
        self._dispatch("lang", self.language_jobs(seeds))
        self._dispatch("task", self.task_jobs(seeds))

    def _dispatch(self, kind: str, jobs: list):
        if self.force:
            for job in jobs:
                d = self.lang_run_dir(*job) if kind == "lang" else self.task_run_dir(*job)
                self._claim(d)
        if self.jobs == 1 or len(jobs) < 2:
            for job in jobs:
                self._run_job(kind, job)
            return
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(self.jobs, mp_context=ctx) as pool:
            futures = [pool.submit(_worker, self.cfg, str(self.out), kind, job) for job in jobs]
            for f in futures:
                self.stats.merge(f.result())

    def _run_job(self, kind: str, job):
        try:
            if kind == "lang":
                self.train_lang(*job)
            else:
                self.train_task(*job)
        except TrainingDivergedError as e:
            log.error("%s run %s diverged at step %d", kind, job, e.step)
            self.stats.absent.append(f"{kind}:{job}")

    # -- evaluation ------------------------------------------------------------------------------

    def _cached_eval(self, key: dict, compute) -> Optional[EvalResult]:
        path = self.out / "evals" / f"{digest(key)}.json"
        if path.is_file() and not (self.force and path not in self._forced):
            self.stats.cells_cached += 1
            return EvalResult(**json.loads(path.read_text()))
        self._forced.add(path)
        result = compute()
        if result is None:
            return None
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(result), sort_keys=True))
        self.stats.cells_evaluated += 1
        return result

    def evaluate_baseline(self, task: str, target: str) -> EvalResult:
        spec = self.cfg.task(task)
        key = {"baseline": True, "backbone": self.backbone_id(), "task": spec.to_dict(),
               "data": self.task_data_id(spec, target), "target": target}
        return self._cached_eval(key, lambda: evaluate(baseline(self.backbone()), self.task_data(task, target)[2],
                                                       spec.template, variant=None))

    def evaluate_cell(self, task: str, variant: Variant, source: str, target: str, seed: int) -> Optional[EvalResult]:
        spec = self.cfg.task(task)
        key = {"task_run": self.task_run_id(task, variant, source, seed), "target": target, "seed": seed,
               "language_run": self.lang_run_id(target, variant.language_kind, seed) if variant.language_kind else None,
               "data": self.task_data_id(spec, target)}

        def compute():
            task_art = self.load_task(task, variant, source, seed)
            if task_art is None:
                return None
            lang_art = None
            if variant.language_kind is not None:
                lang_art = self.load_lang(target, variant.language_kind, seed, train=False)
                if lang_art is None:
                    return None
            asm = assemble(self.backbone(), variant, language=lang_art, task=task_art)
            res = evaluate(asm, self.task_data(task, target)[2], spec.template, source_language=source, seed=seed)
            res.task = task
            return res

        return self._cached_eval(key, compute)

    def matrix(self, seed: int) -> TransferMatrix:
        names = [l.name for l in self.cfg.languages]
        grid = GridSpec([t.name for t in self.cfg.tasks], list(self.cfg.configurations), names, names)
        m = transfer_matrix(grid, lambda t, v, s, g: self.evaluate_cell(t, v, s, g, seed),
                            lambda t, g: self._baseline_named(t, g))
        self.stats.absent.extend(f"seed {seed}: {k}" for k in m.absent)
        return m

    def _baseline_named(self, task: str, target: str) -> EvalResult:
        res = self.evaluate_baseline(task, target)
        res.task = task
        return res

    def results_path(self) -> Path:
        return self.out / "results.tsv"

    def run_matrix(self, seeds: Sequence[int], train: bool = True) -> List[TransferMatrix]:
        if train:
            self.train_all(seeds)
        else:
            self.synth()
        matrices = [self.matrix(s) for s in seeds]
        results = list(matrices[0].baselines.values())
        for m in matrices:
            results.extend(m.cells.values())
        write_results(results, self.results_path())
        return matrices

    # -- report ----------------------------------------------------------------------------------------

    def report(self) -> Tuple[Path, bool]:
        """Summary, relative improvement and heatmap tables from ``results.tsv``."""
        results = read_results(self.results_path())
        names = [l.name for l in self.cfg.languages]
        grid = GridSpec([t.name for t in self.cfg.tasks], list(self.cfg.configurations), names, names)
        agg = aggregate_seeds(results)
        means: Dict[tuple, Dict[str, float]] = {}
        for (task, vname, src, tgt, metric), a in agg.items():
            means.setdefault((task, vname, src, tgt), {})[metric] = a.mean
        matrix = TransferMatrix(grid)
        for (task, vname, src, tgt), metrics in means.items():
            n = next(r.n_examples for r in results if r.task == task and r.target_language == tgt)
            res = EvalResult(task, vname, src, tgt, metrics, n)
            if vname is None:
                matrix.baselines[(task, tgt)] = res
            else:
                matrix.cells[(task, vname, src, tgt)] = res
        matrix.absent = [k for k in grid.cells() if k not in matrix.cells]
        rep = self.out / "report"
        rep.mkdir(parents=True, exist_ok=True)

        with open(rep / "summary.tsv", "w") as fh:
            fh.write("source_lang\ttarget_lang\tconfig\tmean\trank\n")
            for row in summarize(matrix):
                fh.write(f"{row.source}\t{row.target}\t{row.variant}\t{row.mean:.4f}\t{row.rank or ''}\n")

        with open(rep / "relative_improvement.tsv", "w") as fh:
            fh.write("task\tconfig\tsource_lang\ttarget_lang\tmetric\tbaseline\tvalue\trelative_pct\n")
            for (task, vname, src, tgt), res in sorted(matrix.cells.items()):
                metric = PRIMARY_METRIC[self.cfg.task(task).template]
                base = matrix.baselines.get((task, tgt))
                b = base.metrics[metric] if base else float("nan")
                rel = relative_improvement(res.metrics[metric], b) if base else None
                fh.write(f"{task}\t{vname}\t{src}\t{tgt}\t{metric}\t{b:.4f}\t{res.metrics[metric]:.4f}\t"
                         f"{'NA' if rel is None else f'{rel:.2f}'}\n")

        for task in grid.tasks:
            metric = PRIMARY_METRIC[self.cfg.task(task).template]
            for v in grid.variants:
                heat = improvement_heatmap(matrix, task, v, metric)
                write_heatmap(heat, names, names, rep / f"heatmap_{task}_{v.name.lower()}.tsv")

        with open(rep / "seed_aggregate.tsv", "w") as fh:
            fh.write("task\tconfig\tsource_lang\ttarget_lang\tmetric\tmean\tstd\tn_seeds\n")
            for (task, vname, src, tgt, metric), a in sorted(agg.items(), key=lambda kv: tuple(map(str, kv[0]))):
                fh.write(f"{task}\t{vname or 'None'}\t{src or '-'}\t{tgt}\t{metric}\t{a.mean!r}\t{a.std!r}\t{a.n}\n")

        complete = matrix.complete
        return rep, complete


def _worker(cfg: ExperimentConfig, out: str, kind: str, job) -> InvocationStats:
    torch.set_num_threads(1)
    exp = Experiment(cfg, out)
    exp._run_job(kind, job)
    return exp.stats
