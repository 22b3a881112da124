"""Benchmark harness: task ingestion, runs, budget sweeps and reports.

Subcommands ``run``, ``sweep``, ``compare``, ``jenga`` and ``oracle``. Exit
status is 0 on success, 1 when a run fails and 2 for configuration errors.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import random
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import yaml

from .backends.http import EndpointConfig, HttpChat, HttpClient, HttpEditor, HttpGenerator
from .backends.recording import ReplayBackend, Transcript, recording_wrapper
from .core import ALL_ACTIONS, Action, Budget, ImageRef, RunJournal, TaskPrompt, dumps, factorizations, journal_is_complete
from .decomposition import (
    ChatProposer,
    ChatRemovalCritic,
    DecompositionTask,
    SimProposer,
    SimRemovalCritic,
    SimSceneEditor,
    parallel_removal_baseline,
    random_scene,
    run_decomposition,
    sim_scene_task,
)
from .engine import EngineConfig, run_refinement
from .errors import ConfigError, IterRefineError, OracleUnsupported, RunFailed
from .prompts import DEFAULT_TEMPLATES, ChatCritic, PromptTemplates
from .scoring import ChatVerifier, category_means, full_solve_rate, sign_test
from .simenv import SimBackends, SimParams, TruthVerifier, monte_carlo, oracle_mean_score, oracle_solve_rate, sim_task

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2
MALFORMED_LIMIT = 0.10
ROLES = ("generator", "editor", "loop_verifier", "critic", "final_evaluator")

MASKS = {
    "full": ALL_ACTIONS,
    "no_backtrack": ALL_ACTIONS - {Action.BACKTRACK},
    "no_restart": ALL_ACTIONS - {Action.RESTART},
    "no_backtrack_restart": frozenset({Action.CONTINUE, Action.STOP}),
}

AGGREGATE_COLUMNS = ("task_id", "category", "k", "T", "M", "B", "final_score", "solved", "units", "critic_calls")


# --------------------------------------------------------------------------
# config and task files


def load_config(path: str | Path | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"config {path} must be a mapping")
    base = Path(path).parent
    paths = cfg.setdefault("paths", {})
    for key, value in list(paths.items()):
        if value is not None and not Path(value).is_absolute():
            paths[key] = str(base / value)
    return cfg


def budget_from_config(cfg: dict) -> Budget:
    block = cfg.get("budget", {}) or {}
    try:
        if "T" in block and "M" in block:
            return Budget.of(int(block["T"]), int(block["M"]))
        if "B" in block:
            B = int(block["B"])
            T = int(block.get("T", B))
            if B % T:
                raise ConfigError(f"budget T={T} does not divide B={B}")
            return Budget.of(T, B // T)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad budget block {block}: {exc}") from exc
    return Budget.of(4, 4)


def parse_actions(names: Sequence[str] | None) -> frozenset:
    if names is None:
        return ALL_ACTIONS
    try:
        return frozenset(Action.parse(n) for n in names)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def engine_config(cfg: dict, budget: Budget, seed: int, allowed: frozenset | None = None) -> EngineConfig:
    actions = cfg.get("actions", {}) or {}
    allowed = allowed if allowed is not None else parse_actions(actions.get("allowed"))
    try:
        return EngineConfig(
            budget,
            allowed,
            stop_on_perfect_score=bool(actions.get("stop_on_perfect_score", True)),
            seed=seed,
            disallowed_action_fallback=Action.parse(actions.get("fallback", "CONTINUE")),
            continue_from_global_best=bool(actions.get("continue_from_global_best", False)),
            max_workers=int(cfg.get("stream_workers", 1)),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_tasks(path: str | Path) -> tuple[list[TaskPrompt], int]:
    """Read a JSONL task file; returns (tasks, malformed line count)."""
    tasks, bad = [], 0
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read task file {path}: {exc}") from exc
    with fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                tasks.append(TaskPrompt.from_json(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                bad += 1
                logger.warning("%s:%d: skipping malformed task (%s)", path, n, exc)
    return tasks, bad


def sim_params(cfg: dict) -> SimParams:
    block = dict(cfg.get("sim", {}) or {})
    for key in ("n_tasks", "ks"):
        block.pop(key, None)
    try:
        return SimParams.from_dict(block)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad sim block: {exc}") from exc


def task_seed(seed: int, task_id: str) -> int:
    return int.from_bytes(hashlib.sha256(f"{seed}:{task_id}".encode()).digest()[:8], "big") >> 1


# --------------------------------------------------------------------------
# backends


def endpoint_config(cfg: dict, role: str) -> EndpointConfig:
    backends = cfg.get("backends", {}) or {}
    block = backends.get(role)
    if block is None and role == "final_evaluator":
        block = backends.get("loop_verifier")
    if block is None:
        raise ConfigError(f"backends.{role} is not configured")
    try:
        return EndpointConfig.from_dict(block)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"backends.{role}: {exc}") from exc


def templates_from_config(cfg: dict) -> PromptTemplates:
    directory = cfg.get("paths", {}).get("templates")
    return PromptTemplates(directory) if directory else DEFAULT_TEMPLATES


@dataclass
class Roles:
    generator: Any
    editor: Any
    loop_verifier: Any
    critic: Any
    final_evaluator: Any


class BackendFactory:
    """Hands out role backends per task for a given mode (sim, http, replay)."""

    def __init__(self, cfg: dict, mode: str, seed: int, transport=None, transcript: Transcript | None = None):
        if mode not in ("sim", "http", "replay"):
            raise ConfigError(f"unknown backend {mode!r}")
        self.cfg, self.mode, self.seed = cfg, mode, seed
        self.transcript = transcript
        self.templates = templates_from_config(cfg)
        self.allowed = parse_actions((cfg.get("actions", {}) or {}).get("allowed"))
        self._shared: Roles | None = None
        if mode == "http":
            self._shared = self._http_roles(transport)
            if transcript is not None:
                self._shared = Roles(*(recording_wrapper(getattr(self._shared, r), transcript, r) for r in ROLES))
        elif mode == "replay":
            if transcript is None:
                path = cfg.get("paths", {}).get("transcript")
                if not path:
                    raise ConfigError("replay backend needs paths.transcript")
                try:
                    transcript = Transcript.load(path)
                except OSError as exc:
                    raise ConfigError(f"cannot read transcript {path}: {exc}") from exc
            self.transcript = transcript
            self._shared = Roles(*(ReplayBackend(transcript, r) for r in ROLES))

    def _http_roles(self, transport) -> Roles:
        def client(role):
            ep = endpoint_config(self.cfg, role)
            return ep, HttpClient(ep, transport=transport)

        gen, edit = client("generator"), client("editor")
        chats = {r: HttpChat(*client(r)) for r in ("loop_verifier", "critic", "final_evaluator")}
        return Roles(
            HttpGenerator(*gen),
            HttpEditor(*edit),
            ChatVerifier(chats["loop_verifier"], self.templates),
            ChatCritic(chats["critic"], self.allowed, self.templates),
            ChatVerifier(chats["final_evaluator"], self.templates),
        )

    def roles_for(self, task: TaskPrompt, allowed: frozenset | None = None) -> Roles:
        if self._shared is not None:
            return self._shared
        k = len(task.questions) if task.questions else sim_params(self.cfg).k
        params = sim_params(self.cfg).with_(k=k, seed=task_seed(self.seed, task.id))
        b = SimBackends.create(params, allowed if allowed is not None else self.allowed)
        return Roles(b.generator, b.editor, b.verifier, b.critic, TruthVerifier())


def sim_tasks(cfg: dict) -> list[TaskPrompt]:
    block = cfg.get("sim", {}) or {}
    n = int(block.get("n_tasks", 10))
    ks = block.get("ks") or [int(block.get("k", 5))]
    return [sim_task(int(k), f"sim_k{k}_{i:04d}") for k in ks for i in range(n)]


def subset_tasks(tasks: Sequence[TaskPrompt], per_category: int, seed: int) -> list[TaskPrompt]:
    """Seeded sample of at most ``per_category`` tasks per category, file order kept."""
    groups: dict[str, list[int]] = {}
    for i, t in enumerate(tasks):
        groups.setdefault(t.category or "", []).append(i)
    keep: set[int] = set()
    for cat in sorted(groups):
        rng = random.Random(f"{seed}:{cat}")
        idx = groups[cat]
        keep.update(rng.sample(idx, min(per_category, len(idx))))
    return [t for i, t in enumerate(tasks) if i in keep]


def resolve_tasks(cfg: dict, mode: str, seed: int = 0) -> tuple[list[TaskPrompt], int]:
    path = cfg.get("paths", {}).get("tasks")
    if path:
        tasks, bad = load_tasks(path)
    elif mode == "sim":
        tasks, bad = sim_tasks(cfg), 0
    else:
        raise ConfigError("paths.tasks is required for non-sim backends")
    block = cfg.get("subset") or {}
    if "per_category" in block:
        try:
            n = int(block["per_category"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad subset.per_category: {exc}") from exc
        if n < 1:
            raise ConfigError("subset.per_category must be >= 1")
        tasks = subset_tasks(tasks, n, int(block.get("seed", seed)))
    return tasks, bad


# --------------------------------------------------------------------------
# reports


def write_csv(path: Path, columns: Sequence[str], rows: Sequence[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for row in rows:
        w.writerow({c: _cell(row.get(c)) for c in columns})
    path.write_text(buf.getvalue(), encoding="utf-8")


def _cell(value) -> str:
    if value is None:
        return "absent"
    if isinstance(value, Fraction):
        return f"{float(value):.6f}"
    if isinstance(value, float):
        return f"{value:.6f}"
    if isinstance(value, bool):
        return "1" if value else "0"
    return str(value)


def format_table(columns: Sequence[str], rows: Sequence[dict]) -> str:
    cells = [[str(c) for c in columns]] + [[_cell(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(columns))]
    lines = ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def emit(path: Path, columns: Sequence[str], rows: Sequence[dict], header: str = "") -> str:
    write_csv(path.with_suffix(".csv"), columns, rows)
    text = (header + "\n" if header else "") + format_table(columns, rows)
    path.with_suffix(".txt").write_text(text, encoding="utf-8")
    return text


# --------------------------------------------------------------------------
# run


@dataclass
class TaskOutcome:
    task: TaskPrompt
    row: dict | None
    error: str | None = None


def run_one(task: TaskPrompt, cfg: EngineConfig, roles: Roles, run_dir: Path, resume: bool) -> TaskOutcome:
    result_path = run_dir / "result.json"
    if resume and journal_is_complete(run_dir) and result_path.exists():
        logger.info("task %s already complete; skipping", task.id)
        return TaskOutcome(task, json.loads(result_path.read_text(encoding="utf-8"))["row"])
    journal = RunJournal(task.id, {"engine": cfg.to_json(), "task": task.to_json()}, run_dir=run_dir)
    try:
        result = run_refinement(task, cfg, roles.generator, roles.editor, roles.loop_verifier, roles.critic, journal)
    except RunFailed as exc:
        return TaskOutcome(task, None, str(exc))
    final = roles.final_evaluator.verify(result.best.image, task)
    B = cfg.budget
    row = {
        "task_id": task.id, "category": task.category or "", "k": len(task.questions),
        "T": B.rounds, "M": B.streams, "B": B.total_units,
        "final_score": f"{float(final.score):.6f}", "solved": int(final.perfect),
        "units": result.units_consumed, "critic_calls": result.critic_calls,
    }
    doc = {"task": task.to_json(), "engine": cfg.to_json(), "result": result.to_json(),
           "final_report": final.to_json(), "row": row}
    result_path.write_text(dumps(doc, indent=2) + "\n", encoding="utf-8")
    return TaskOutcome(task, row)


def run_tasks(
    tasks: Sequence[TaskPrompt],
    factory: BackendFactory,
    cfg: dict,
    budget: Budget,
    out: Path,
    resume: bool = False,
    allowed: frozenset | None = None,
) -> list[TaskOutcome]:
    ecfg = engine_config(cfg, budget, factory.seed, allowed)
    workers = int(cfg.get("workers", 1))

    def work(task):
        return run_one(task, ecfg, factory.roles_for(task, ecfg.allowed_actions), out / _safe(task.id), resume)

    # shared http/replay roles are not assumed thread-safe for replay order
    if workers > 1 and factory.mode == "sim":
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(work, tasks))
    return [work(t) for t in tasks]


def _safe(task_id: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in task_id)


def write_aggregate(out: Path, outcomes: Sequence[TaskOutcome]) -> tuple[list[dict], str]:
    rows = [o.row for o in outcomes if o.row is not None]
    write_csv(out / "aggregate.csv", AGGREGATE_COLUMNS, rows)
    solved = [Fraction(int(r["solved"])) for r in rows]
    summary = ""
    if rows:
        mean = sum(Fraction(r["final_score"]) for r in rows) / len(rows)
        summary = (f"tasks: {len(rows)}  full solve rate: {float(full_solve_rate(solved)):.4f}  "
                   f"mean score: {float(mean):.4f}\n")
    by_cat = category_means({"score": [(r["category"], Fraction(r["final_score"])) for r in rows]})
    text = summary + format_table(("category", "score"), by_cat)
    (out / "aggregate.txt").write_text(text, encoding="utf-8")
    return rows, text


def cmd_run(args, cfg: dict) -> int:
    mode = args.backend
    out = Path(args.out)
    tasks, bad = resolve_tasks(cfg, mode, args.seed)
    total = len(tasks) + bad
    if total == 0:
        raise ConfigError("no tasks to run")
    factory = BackendFactory(cfg, mode, args.seed, transcript=Transcript() if mode == "http" and cfg["paths"].get("transcript") else None)
    outcomes = run_tasks(tasks, factory, cfg, budget_from_config(cfg), out, args.resume)
    if mode == "http" and factory.transcript is not None:
        factory.transcript.save(cfg["paths"]["transcript"])
    _, text = write_aggregate(out, outcomes)
    sys.stdout.write(text)
    failed = [o for o in outcomes if o.error]
    for o in failed:
        logger.error("task %s failed: %s", o.task.id, o.error)
    if bad / total > MALFORMED_LIMIT:
        logger.error("%d of %d task lines malformed", bad, total)
        return EXIT_FAILED
    return EXIT_FAILED if failed else EXIT_OK


# --------------------------------------------------------------------------
# sweep and oracle


SWEEP_COLUMNS = ("I", "P", "B", "solve_rate", "mean_score")


def sweep_rows(budgets: Sequence[int], evaluate: Callable[[Budget], tuple]) -> list[dict]:
    rows = []
    for B in sorted(set(int(b) for b in budgets)):
        for b in factorizations(B):
            solve, mean = evaluate(b)
            rows.append({"I": b.rounds, "P": b.streams, "B": B, "solve_rate": solve, "mean_score": mean})
    return rows


def _masks(block: dict) -> dict[str, frozenset]:
    names = block.get("masks") or ["full"]
    out = {}
    for name in names:
        if name not in MASKS:
            raise ConfigError(f"unknown action mask {name!r}; choose from {sorted(MASKS)}")
        out[name] = MASKS[name]
    return out


def cmd_sweep(args, cfg: dict) -> int:
    block = cfg.get("sweep", {}) or {}
    budgets = block.get("budgets", [1, 2, 4, 8, 16])
    mode = block.get("mode", "oracle" if args.backend == "sim" else "tasks")
    out = Path(args.out)
    params = sim_params(cfg).with_(seed=args.seed)
    status = EXIT_OK
    for name, allowed in _masks(block).items():
        if mode == "oracle":
            def evaluate(b, allowed=allowed):
                return oracle_solve_rate(params, b, allowed), oracle_mean_score(params, b, allowed)
        elif mode == "monte_carlo":
            n = int(block.get("n_trials", 5000))

            def evaluate(b, allowed=allowed, n=n):
                r = monte_carlo(params, b, n, seed=args.seed, allowed_actions=allowed)
                return r.solve_rate, r.mean_score
        elif mode == "tasks":
            tasks, _ = resolve_tasks(cfg, args.backend, args.seed)
            factory = BackendFactory(cfg, args.backend, args.seed)

            def evaluate(b, allowed=allowed, tasks=tasks, factory=factory):
                nonlocal status
                run_dir = out / name / f"T{b.rounds}_M{b.streams}"
                outcomes = run_tasks(tasks, factory, cfg, b, run_dir, args.resume, allowed)
                write_aggregate(run_dir, outcomes)
                rows = [o.row for o in outcomes if o.row]
                if len(rows) < len(outcomes):
                    status = EXIT_FAILED
                if not rows:
                    return None, None
                return (Fraction(sum(int(r["solved"]) for r in rows), len(rows)),
                        sum(Fraction(r["final_score"]) for r in rows) / len(rows))
        else:
            raise ConfigError(f"unknown sweep mode {mode!r}")
        try:
            rows = sweep_rows(budgets, evaluate)
        except OracleUnsupported as exc:
            raise ConfigError(str(exc)) from exc
        sys.stdout.write(emit(out / f"sweep_{name}", SWEEP_COLUMNS, rows, f"# sweep {name} ({mode})"))
    return status


ORACLE_COLUMNS = ("k", "T", "M", "B", "policy", "solve_rate")


def oracle_rows(params: SimParams, ks: Sequence[int], budgets: Sequence[int], masks: dict) -> list[dict]:
    rows = []
    for k in ks:
        p = params.with_(k=int(k))
        for B in sorted(set(int(b) for b in budgets)):
            for b in factorizations(B):
                for name, allowed in masks.items():
                    rate = oracle_solve_rate(p, b, allowed)
                    rows.append({"k": k, "T": b.rounds, "M": b.streams, "B": B, "policy": name, "solve_rate": f"{float(rate):.10f}"})
    return rows


def cmd_oracle(args, cfg: dict) -> int:
    block = cfg.get("oracle", {}) or {}
    params = sim_params(cfg)
    ks = block.get("ks") or [params.k]
    try:
        rows = oracle_rows(params, ks, block.get("budgets", [1, 2, 4, 8, 16]), _masks(block))
    except OracleUnsupported as exc:
        raise ConfigError(str(exc)) from exc
    sys.stdout.write(emit(Path(args.out) / "oracle", ORACLE_COLUMNS, rows))
    return EXIT_OK


# --------------------------------------------------------------------------
# compare


COMPARE_COLUMNS = ("group", "key", "n", "mean_a", "mean_b", "delta", "wins_b", "losses_b", "p_value")


def _read_aggregate(run_dir: Path) -> dict[str, dict]:
    path = run_dir / "aggregate.csv"
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            return {r["task_id"]: r for r in csv.DictReader(fh)}
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc


def compare_rows(a: dict[str, dict], b: dict[str, dict]) -> list[dict]:
    """Per-category, per-k and overall deltas (b minus a) with a sign test.

    Tasks are paired by id; a group present on only one side gets absent
    cells rather than a zero delta.
    """
    rows = []
    for group, field in (("category", "category"), ("k", "k"), ("all", None)):
        keys = sorted({r[field] if field else "all" for r in list(a.values()) + list(b.values())},
                      key=lambda s: (len(s), s) if group == "k" else s)
        for key in keys:
            ra = {t: r for t, r in a.items() if field is None or r[field] == key}
            rb = {t: r for t, r in b.items() if field is None or r[field] == key}
            mean_a = sum(Fraction(r["final_score"]) for r in ra.values()) / len(ra) if ra else None
            mean_b = sum(Fraction(r["final_score"]) for r in rb.values()) / len(rb) if rb else None
            paired = sorted(set(ra) & set(rb))
            wins = sum(1 for t in paired if Fraction(rb[t]["final_score"]) > Fraction(ra[t]["final_score"]))
            losses = sum(1 for t in paired if Fraction(rb[t]["final_score"]) < Fraction(ra[t]["final_score"]))
            both = mean_a is not None and mean_b is not None
            rows.append({
                "group": group, "key": key, "n": len(paired), "mean_a": mean_a, "mean_b": mean_b,
                "delta": mean_b - mean_a if both else None,
                "wins_b": wins if both else None, "losses_b": losses if both else None,
                "p_value": f"{sign_test(wins, losses):.6g}" if both else None,
            })
        if group == "all":
            sa = [Fraction(int(r["solved"])) for r in a.values()]
            sb = [Fraction(int(r["solved"])) for r in b.values()]
            if sa and sb:
                fa, fb = full_solve_rate(sa), full_solve_rate(sb)
                paired = sorted(set(a) & set(b))
                wins = sum(1 for t in paired if int(b[t]["solved"]) > int(a[t]["solved"]))
                losses = sum(1 for t in paired if int(b[t]["solved"]) < int(a[t]["solved"]))
                rows.append({"group": "all", "key": "full_solve_rate", "n": len(paired), "mean_a": fa, "mean_b": fb,
                             "delta": fb - fa, "wins_b": wins, "losses_b": losses,
                             "p_value": f"{sign_test(wins, losses):.6g}"})
    return rows


def cmd_compare(args, cfg: dict) -> int:
    rows = compare_rows(_read_aggregate(Path(args.run_a)), _read_aggregate(Path(args.run_b)))
    header = f"# {args.run_b} minus {args.run_a}"
    sys.stdout.write(emit(Path(args.out) / "compare", COMPARE_COLUMNS, rows, header))
    return EXIT_OK


# --------------------------------------------------------------------------
# jenga


JENGA_COLUMNS = ("scene_id", "objects", "iterative_solved", "parallel_solved", "iterative_edits", "parallel_edits")


def _jenga_backends(cfg: dict, mode: str, seed: int):
    block = cfg.get("jenga", {}) or {}
    if mode == "sim":
        editor = SimSceneEditor(block.get("flaw_probs"), seed=seed)
        return SimProposer(), editor, SimRemovalCritic()
    if mode != "http":
        raise ConfigError("jenga supports the sim and http backends")
    bk = cfg.get("backends", {}) or {}
    if "proposer" not in bk or "removal_critic" not in bk:
        raise ConfigError("jenga over http needs backends.proposer and backends.removal_critic")
    ep = {r: endpoint_config(cfg, r) for r in ("proposer", "removal_critic", "editor")}
    templates = templates_from_config(cfg)
    return (ChatProposer(HttpChat(ep["proposer"], HttpClient(ep["proposer"])), templates),
            HttpEditor(ep["editor"], HttpClient(ep["editor"])),
            ChatRemovalCritic(HttpChat(ep["removal_critic"], HttpClient(ep["removal_critic"])), templates))


def jenga_scenes(cfg: dict, mode: str, seed: int) -> list[DecompositionTask]:
    block = cfg.get("jenga", {}) or {}
    budget = int(block.get("per_step_budget", 4))
    try:
        if mode == "sim":
            n = int(block.get("n_scenes", 200))
            lo, hi = int(block.get("min_objects", 3)), int(block.get("max_objects", 8))
            return [sim_scene_task(random_scene(np.random.default_rng([seed, i]), lo, hi), budget, f"scene_{i:04d}")
                    for i in range(n)]
        directory = cfg.get("paths", {}).get("scenes")
        if not directory:
            raise ConfigError("paths.scenes is required for jenga over http")
        files = sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".webp"))
        max_steps = int(block.get("max_steps", 8))
        return [DecompositionTask(ImageRef(path=str(p), media_type=_media(p)), max_steps, budget, p.stem) for p in files]
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _media(p: Path) -> str:
    return {".png": "image/png", ".webp": "image/webp"}.get(p.suffix.lower(), "image/jpeg")


def cmd_jenga(args, cfg: dict) -> int:
    scenes = jenga_scenes(cfg, args.backend, args.seed)
    if not scenes:
        raise ConfigError("jenga scene set is empty")
    out = Path(args.out)
    rows, wins, losses = [], 0, 0
    for i, task in enumerate(scenes):
        results = {}
        for policy, fn in (("iterative", run_decomposition), ("parallel", parallel_removal_baseline)):
            proposer, editor, critic = _jenga_backends(cfg, args.backend, args.seed)
            journal = RunJournal(task.scene_id, {"policy": policy, "per_step_budget": task.per_step_budget},
                                 run_dir=out / policy / _safe(task.scene_id))
            # both policies share the scene seed so attempt-1 edits are paired
            results[policy] = fn(task, proposer, editor, critic, journal, seed=args.seed * 1_000_003 + i)
        it, par = results["iterative"], results["parallel"]
        wins += it.solved and not par.solved
        losses += par.solved and not it.solved
        rows.append({
            "scene_id": task.scene_id, "objects": len(it.steps),
            "iterative_solved": it.solved, "parallel_solved": par.solved,
            "iterative_edits": sum(s.editor_calls for s in it.steps),
            "parallel_edits": sum(s.editor_calls for s in par.steps),
        })
    write_csv(out / "jenga_scenes.csv", JENGA_COLUMNS, rows)
    n = len(rows)
    summary = [
        {"policy": "iterative", "full_solve_rate": Fraction(sum(r["iterative_solved"] for r in rows), n)},
        {"policy": "parallel", "full_solve_rate": Fraction(sum(r["parallel_solved"] for r in rows), n)},
    ]
    header = f"# {n} scenes, per-step budget {scenes[0].per_step_budget}; sign test p = {sign_test(wins, losses):.3g}"
    sys.stdout.write(emit(out / "jenga", ("policy", "full_solve_rate"), summary, header))
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="iterrefine", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default):
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help=f"output directory (default {out_default})")
        p.add_argument("--resume", action="store_true", help="skip tasks whose journal is complete")
        p.add_argument("--backend", choices=("http", "sim", "replay"), default=None)

    common(sub.add_parser("run", help="run the task set at one budget"), "runs")
    common(sub.add_parser("sweep", help="solve rate for every (T, M) split of each budget"), "sweep")
    p = sub.add_parser("compare", help="paired deltas between two run directories")
    common(p, "compare")
    p.add_argument("run_a")
    p.add_argument("run_b")
    common(sub.add_parser("jenga", help="iterative vs parallel scene decomposition"), "jenga")
    common(sub.add_parser("oracle", help="exact solve rates in the synthetic environment"), "oracle")
    return parser


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "compare": cmd_compare, "jenga": cmd_jenga, "oracle": cmd_oracle}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        cfg.setdefault("paths", {})
        args.seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
        args.backend = args.backend or cfg.get("backend", "sim")
        args.out = args.out or cfg["paths"].get("out") or args.command
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        logger.error("%s", exc)
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IterRefineError as exc:
        logger.error("%s", exc)
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
