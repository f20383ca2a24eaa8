"""
reasonforge CLI - synthesize, run, replay, validate, evaluate and inspect
least-to-most reasoning data.

Exit codes: 0 success, 1 unexpected failure, 2 configuration or input error,
3 synthesis produced nothing. Per-task failures are recorded in the output
files and never change the exit code.
"""

import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, NoReturn, Optional, Tuple

import click
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from . import __version__
from .canvas import full_view, render
from .config import BackendKind, BackendSpec, Config, load_config, write_template
from .errors import AnnotationParseError, ConfigError, DomainError, IdMismatchError, ReasonForgeError
from .reasoner import ReasoningTask, ScriptedPolicy, Termination, Trace, first_divergence, replay, run
from .scene import SceneSet, generate_scenes, import_detections, load_scenes, write_scenes
from .synthesis import GeneratorBinding, ReasoningPath, synthesize_dataset, validate_example
from .tools import ToolBackendBinding, ToolKind
from .dataset import (
    TRACES_FILE,
    corpus_stats,
    read_gold,
    read_traces,
    write_corpus,
    write_jsonl,
    write_stats,
)
from .evalharness import MetricKind, evaluate_corpus, render_report_table, write_report

console = Console()
logger = logging.getLogger(__name__)

EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_NO_YIELD = 3


def _fail(message: str, code: int = EXIT_FAILURE) -> NoReturn:
    console.print(f"❌ {message}", style="red", markup=False)
    sys.exit(code)


def _config(ctx: click.Context, **flags) -> Config:
    try:
        return load_config(ctx.obj.get("config_path"), **flags)
    except ConfigError as e:
        _fail(f"Config error: {e}", EXIT_USAGE)


def _scenes(path: str) -> SceneSet:
    if not Path(path).exists():
        _fail(f"Scenes file not found: {path}", EXIT_USAGE)
    try:
        return load_scenes(path)
    except AnnotationParseError as e:
        _fail(f"Invalid scenes file: {e}", EXIT_USAGE)


def _gold(path: str) -> List[ReasoningPath]:
    if not Path(path).exists():
        _fail(f"Dataset file not found: {path}", EXIT_USAGE)
    try:
        return read_gold(path)
    except (AnnotationParseError, ReasonForgeError) as e:
        _fail(f"Invalid dataset file: {e}", EXIT_USAGE)


def _traces(path: str) -> List[Trace]:
    if not Path(path).exists():
        _fail(f"Traces file not found: {path}", EXIT_USAGE)
    try:
        return read_traces(path)
    except AnnotationParseError as e:
        _fail(f"Invalid traces file: {e}", EXIT_USAGE)


def _tool_binding(config: Config, scenes: SceneSet, tools: str, endpoint: Optional[str], pool) -> ToolBackendBinding:
    """Oracle for every tool, or the remote backends the config (or --endpoint) names"""
    binding = ToolBackendBinding.oracle(scenes, alpha=config.alpha)
    if tools == "oracle":
        return binding
    from .client import RemoteToolBackend

    size = (config.render_width, config.render_height)
    remote = 0
    for kind in ToolKind:
        spec = config.backends.tool(kind)
        if endpoint:
            spec = BackendSpec(kind=BackendKind.REMOTE, endpoint=endpoint, timeout=spec.timeout,
                               max_in_flight=spec.max_in_flight)
        if spec.kind == BackendKind.REMOTE:
            binding = binding.with_backend(kind, RemoteToolBackend(pool.get(spec), scenes, render_size=size))
            remote += 1
    if not remote:
        _fail("--tools remote needs --endpoint or a remote tool backend in the config", EXIT_USAGE)
    return binding


def _generator_binding(config: Config, pool) -> GeneratorBinding:
    questioner = combiner = None
    if config.backends.questioner.kind == BackendKind.REMOTE or config.backends.combiner.kind == BackendKind.REMOTE:
        from .client import RemoteCombiner, RemoteQuestioner

        if config.backends.questioner.kind == BackendKind.REMOTE:
            questioner = RemoteQuestioner(pool.get(config.backends.questioner))
        if config.backends.combiner.kind == BackendKind.REMOTE:
            combiner = RemoteCombiner(pool.get(config.backends.combiner))
    return GeneratorBinding(
        questioner=questioner,
        combiner=combiner,
        rng_seed=config.seed,
        proximity_delta=config.delta,
        min_confidence=config.min_confidence,
        alpha=config.alpha,
        max_attempts=config.max_attempts,
    )


def _pool():
    from .client import TransportPool

    return TransportPool()


@click.group()
@click.version_option(version=__version__)
@click.option('--config', 'config_path', type=click.Path(), default=None,
              help='Config file (YAML/JSON) [default: $REASONFORGE_CONFIG, else built-in defaults]')
@click.option('--log-level', default='WARNING', show_default=True,
              type=click.Choice(['DEBUG', 'INFO', 'WARNING', 'ERROR'], case_sensitive=False),
              help='Log level (logs go to stderr)')
@click.pass_context
def main(ctx: click.Context, config_path: Optional[str], log_level: str):
    """reasonforge - least-to-most visual reasoning engine and data synthesis"""
    ctx.ensure_object(dict)
    ctx.obj["config_path"] = config_path
    logging.basicConfig(
        level=getattr(logging, log_level.upper()),
        format="%(message)s",
        handlers=[RichHandler(console=Console(stderr=True), show_path=False)],
        force=True,
    )


@main.command()
@click.option('--format', 'fmt', default='yaml', show_default=True, type=click.Choice(['yaml', 'json']),
              help='Config format')
@click.option('--output', default='reasonforge.yaml', show_default=True, help='Output file')
def init(fmt: str, output: str):
    """Write a configuration template"""
    try:
        config_file = write_template(output, fmt)
    except (ConfigError, OSError) as e:
        _fail(f"Error creating configuration: {e}")
    console.print(f"✅ Created configuration: {config_file}", style="green")


@main.command()
@click.option('--count', default=10, show_default=True, type=click.IntRange(min=1), help='Number of scenes')
@click.option('--seed', default=0, show_default=True, type=click.IntRange(min=0), help='Generator seed')
@click.option('--width', default=640, show_default=True, type=click.IntRange(min=640), help='Scene width')
@click.option('--height', default=480, show_default=True, type=click.IntRange(min=300), help='Scene height')
@click.option('--out', required=True, help='Output scenes file')
def scenes(count: int, seed: int, width: int, height: int, out: str):
    """Generate synthetic scenes"""
    written = write_scenes(generate_scenes(count, seed=seed, width=width, height=height), out)
    console.print(f"✅ Wrote {count} scenes to {written}", style="green")


@main.command('import-detections')
@click.option('--input', 'input_path', required=True, help='Detector output (scene file schema)')
@click.option('--out', required=True, help='Output scenes file')
def import_detections_cmd(input_path: str, out: str):
    """Import detector output, dropping malformed detections"""
    if not Path(input_path).exists():
        _fail(f"Input file not found: {input_path}", EXIT_USAGE)
    try:
        imported = import_detections(input_path)
    except AnnotationParseError as e:
        _fail(f"Invalid detections file: {e}", EXIT_USAGE)
    write_scenes(imported, out)
    console.print(f"✅ Imported {len(imported)} scenes to {out}", style="green")


@main.command()
@click.option('--scenes', 'scenes_path', required=True, help='Scenes file')
@click.option('--out', required=True, help='Output directory')
@click.option('--count', type=click.IntRange(min=1), default=None, help='Cap on emitted paths [default: no cap]')
@click.option('--per-scene', type=int, default=None, help='Paths per scene [default: 5]')
@click.option('--seed', type=click.IntRange(min=0), default=None, help='Sampling seed [default: 0]')
@click.option('--max-chain-len', type=int, default=None, help='Maximum nodes per chain [default: 4]')
@click.option('--parallelism', type=int, default=None, help='Scene workers [default: 1]')
@click.option('--render-images', is_flag=True, help='Also write one PNG per step record')
@click.pass_context
def synthesize(ctx, scenes_path: str, out: str, count: Optional[int], per_scene: Optional[int],
               seed: Optional[int], max_chain_len: Optional[int], parallelism: Optional[int], render_images: bool):
    """Synthesize validated least-to-most reasoning paths"""
    config = _config(ctx, per_scene=per_scene, seed=seed, max_chain_len=max_chain_len, parallelism=parallelism)
    scene_set = _scenes(scenes_path)
    pool = _pool()
    try:
        binding = _generator_binding(config, pool)
        with console.status("Synthesizing paths..."):
            paths = synthesize_dataset(scene_set, binding, config.per_scene, config.max_chain_len,
                                       parallelism=config.parallelism, count=count)
        if not paths:
            _fail(f"No paths survived validation for {len(scene_set)} scenes", EXIT_NO_YIELD)
        write_corpus(out, paths, scene_set, alpha=config.alpha, render_images=render_images,
                     render_size=(config.render_width, config.render_height))
    except ReasonForgeError as e:
        _fail(f"Synthesis failed: {e}")
    finally:
        pool.close()
    console.print(f"✅ Synthesized {len(paths)} paths from {len(scene_set)} scenes into {out}", style="green")


@main.command('run')
@click.option('--dataset', required=True, help='Gold paths (dataset.paths.jsonl or dataset.steps.jsonl)')
@click.option('--scenes', 'scenes_path', required=True, help='Scenes file')
@click.option('--policy', default='scripted', show_default=True, type=click.Choice(['scripted', 'remote']),
              help='Policy backend')
@click.option('--tools', default='oracle', show_default=True, type=click.Choice(['oracle', 'remote']),
              help='Tool backends')
@click.option('--endpoint', default=None, help='Remote endpoint for every tool [default: from config]')
@click.option('--out', default=TRACES_FILE, show_default=True, help='Output traces file')
@click.option('--max-steps', type=int, default=None, help='Step limit per task [default: 8]')
@click.option('--parallelism', type=int, default=None, help='Concurrent tasks [default: 1]')
@click.option('--context-passthrough/--no-context-passthrough', default=None,
              help='Pass prior text outputs to the policy [default: off]')
@click.pass_context
def run_cmd(ctx, dataset: str, scenes_path: str, policy: str, tools: str, endpoint: Optional[str], out: str,
            max_steps: Optional[int], parallelism: Optional[int], context_passthrough: Optional[bool]):
    """Execute every task of a dataset and write traces"""
    config = _config(ctx, max_steps=max_steps, parallelism=parallelism, context_passthrough=context_passthrough)
    scene_set = _scenes(scenes_path)
    gold = _gold(dataset)
    pool = _pool()
    try:
        binding = _tool_binding(config, scene_set, tools, endpoint, pool)
        remote_policy = None
        if policy == 'remote':
            from .client import RemotePolicy

            spec = config.backends.policy
            if spec.kind != BackendKind.REMOTE:
                _fail("--policy remote needs a remote policy backend in the config", EXIT_USAGE)
            remote_policy = RemotePolicy(pool.get(spec), scene_set,
                                         render_size=(config.render_width, config.render_height))

        def execute(path: ReasoningPath) -> Trace:
            task = ReasoningTask(task_id=path.path_id, scene_id=path.scene_id, question=path.main_question,
                                 gold_answer=path.gold_answer)
            chosen = remote_policy or ScriptedPolicy.from_path(path)
            return run(task, chosen, binding, max_steps=config.max_steps,
                       context_passthrough=config.context_passthrough)

        with console.status(f"Running {len(gold)} tasks..."):
            if config.parallelism > 1:
                with ThreadPoolExecutor(max_workers=config.parallelism) as executor:
                    traces = list(executor.map(execute, gold))
            else:
                traces = [execute(p) for p in gold]
        write_jsonl(out, traces)
    except (ReasonForgeError, OSError) as e:
        _fail(f"Run failed: {e}")
    finally:
        pool.close()

    answered = sum(t.termination == Termination.ANSWERED for t in traces)
    console.print(f"✅ Wrote {len(traces)} traces to {out} ({answered} answered)", style="green")


@main.command('replay')
@click.option('--traces', 'traces_path', required=True, help='Traces file')
@click.option('--scenes', 'scenes_path', required=True, help='Scenes file')
@click.option('--out', default=None, help='Write replayed traces here')
@click.pass_context
def replay_cmd(ctx, traces_path: str, scenes_path: str, out: Optional[str]):
    """Re-execute recorded traces with oracle tools and report divergences"""
    config = _config(ctx)
    scene_set = _scenes(scenes_path)
    traces = _traces(traces_path)
    binding = ToolBackendBinding.oracle(scene_set, alpha=config.alpha)

    replayed: List[Trace] = []
    divergent: List[Tuple[str, str]] = []
    for trace in traces:
        try:
            again = replay(trace, binding)
        except DomainError:
            divergent.append((trace.task.task_id, "no steps"))
            continue
        replayed.append(again)
        step = first_divergence(trace, again)
        if step is not None:
            divergent.append((trace.task.task_id, f"step {step}"))

    if out:
        write_jsonl(out, replayed)
    if divergent:
        table = Table(title="Divergent traces")
        table.add_column("Task", style="cyan")
        table.add_column("First divergence", style="yellow")
        for task_id, where in divergent:
            table.add_row(task_id, where)
        console.print(table)
    console.print(f"Replayed {len(replayed)} of {len(traces)} traces, {len(divergent)} diverged")


@main.command()
@click.option('--dataset', required=True, help='Gold paths file')
@click.option('--scenes', 'scenes_path', required=True, help='Scenes file')
@click.option('--grammar/--no-grammar', default=True, show_default=True,
              help='Template-grammar checks (turn off for remotely generated questions)')
@click.option('--out', default=None, help='Write one validation report per line here')
@click.option('--strict', is_flag=True, help='Exit 1 when any path fails')
@click.pass_context
def validate(ctx, dataset: str, scenes_path: str, grammar: bool, out: Optional[str], strict: bool):
    """Run the three quality checks over a dataset"""
    config = _config(ctx)
    scene_set = _scenes(scenes_path)
    gold = _gold(dataset)
    reports = []
    for path in gold:
        if path.scene_id not in scene_set:
            _fail(f"Path {path.path_id} refers to unknown scene {path.scene_id}", EXIT_USAGE)
        reports.append(validate_example(path, scene_set.get(path.scene_id), alpha=config.alpha, grammar=grammar))
    if out:
        write_jsonl(out, reports)

    failed = [r for r in reports if not r.passed]
    table = Table(title=f"Validation ({len(reports) - len(failed)}/{len(reports)} passed)")
    table.add_column("Check", style="cyan")
    table.add_column("Passed", justify="right", style="green")
    table.add_row("sub-question", str(sum(r.sub_question_ok for r in reports)))
    table.add_row("argument", str(sum(r.argument_ok for r in reports)))
    table.add_row("main question", str(sum(r.main_question_ok for r in reports)))
    console.print(table)
    for report in failed[:10]:
        console.print(f"{report.path_id}: {'; '.join(report.diagnostics)}", style="yellow", markup=False)
    if failed and strict:
        sys.exit(EXIT_FAILURE)


@main.command('eval')
@click.option('--traces', 'traces_path', required=True, help='Traces file')
@click.option('--gold', 'gold_path', required=True, help='Gold paths file')
@click.option('--scenes', 'scenes_path', required=True, help='Scenes file (for error attribution)')
@click.option('--metric', default='recall', show_default=True, type=click.Choice(['em', 'recall']),
              help='Answer metric')
@click.option('--out', default='report.json', show_default=True, help='Report file')
@click.option('--parallelism', type=int, default=None, help='Concurrent classifications [default: 1]')
@click.pass_context
def eval_cmd(ctx, traces_path: str, gold_path: str, scenes_path: str, metric: str, out: str,
             parallelism: Optional[int]):
    """Score traces against gold paths and attribute errors"""
    config = _config(ctx, parallelism=parallelism)
    scene_set = _scenes(scenes_path)
    traces = _traces(traces_path)
    gold = _gold(gold_path)
    binding = ToolBackendBinding.oracle(scene_set, alpha=config.alpha)
    try:
        report = evaluate_corpus(traces, gold, MetricKind(metric), binding, parallelism=config.parallelism)
    except IdMismatchError as e:
        _fail(f"Id mismatch: {e}", EXIT_USAGE)
    write_report(out, report)
    console.print(render_report_table(report))
    console.print(f"accuracy: {report.accuracy:.4f}")


@main.command()
@click.option('--dataset', required=True, help='Gold paths file')
@click.option('--out', default=None, help='Write stats JSON here')
def stats(dataset: str, out: Optional[str]):
    """Corpus statistics"""
    report = corpus_stats(_gold(dataset))
    if out:
        write_stats(out, report)
    table = Table(title=f"Corpus ({report.total} paths, {report.steps} steps)")
    table.add_column("Measure", style="cyan")
    table.add_column("Count", justify="right", style="green")
    for k, n in report.by_steps.items():
        table.add_row(f"paths with {k} steps", str(n))
    for tool, n in report.tools.items():
        table.add_row(f"{tool} calls", str(n))
    for kind, n in report.node_kinds.items():
        table.add_row(f"{kind} nodes", str(n))
    console.print(table)


@main.command('render')
@click.option('--scenes', 'scenes_path', required=True, help='Scenes file')
@click.option('--out', required=True, help='Output PNG')
@click.option('--scene-id', default=None, help='Scene to render [default: first scene]')
@click.option('--dataset', default=None, help='Gold paths file, to render a step view')
@click.option('--path-id', default=None, help='Path whose step view is rendered')
@click.option('--step', type=click.IntRange(min=1), default=1, show_default=True, help='Step of --path-id')
@click.option('--width', type=int, default=None, help='Image width [default: 448]')
@click.option('--height', type=int, default=None, help='Image height [default: 448]')
@click.pass_context
def render_cmd(ctx, scenes_path: str, out: str, scene_id: Optional[str], dataset: Optional[str],
               path_id: Optional[str], step: int, width: Optional[int], height: Optional[int]):
    """Render a scene, or the image a path step sees, to PNG"""
    config = _config(ctx, render_width=width, render_height=height)
    scene_set = _scenes(scenes_path)
    if not len(scene_set):
        _fail("Scenes file is empty", EXIT_USAGE)

    if path_id is not None:
        if dataset is None:
            _fail("--path-id needs --dataset", EXIT_USAGE)
        by_id: Dict[str, ReasoningPath] = {p.path_id: p for p in _gold(dataset)}
        if path_id not in by_id:
            _fail(f"Unknown path {path_id}", EXIT_USAGE)
        path = by_id[path_id]
        if step > len(path.steps):
            _fail(f"Path {path_id} has {len(path.steps)} steps", EXIT_USAGE)
        view = path.steps[step - 1].view
    else:
        scene = scene_set[0] if scene_id is None else None
        if scene is None:
            if scene_id not in scene_set:
                _fail(f"Unknown scene {scene_id}", EXIT_USAGE)
            scene = scene_set.get(scene_id)
        view = full_view(scene)

    try:
        png = render(view, scene_set.get(view.scene_id), config.render_width, config.render_height)
    except ReasonForgeError as e:
        _fail(f"Render failed: {e}")
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    Path(out).write_bytes(png)
    console.print(f"✅ Rendered {view.scene_id} to {out}", style="green")


@main.command()
@click.option('--scenes', 'scenes_path', required=True, help='Scenes file the oracle answers from')
@click.option('--dataset', default=None, help='Gold paths for the scripted policy route')
@click.option('--host', default='127.0.0.1', show_default=True, help='Host to bind to')
@click.option('--port', default=8765, show_default=True, help='Port to bind to')
@click.option('--stdio', is_flag=True, help='Serve newline-delimited JSON on stdin/stdout instead of HTTP')
@click.pass_context
def serve(ctx, scenes_path: str, dataset: Optional[str], host: str, port: int, stdio: bool):
    """Serve oracle tools, scripted policy and template generators over the wire protocol"""
    from .server import WireHandler, serve as serve_http, serve_stdio

    config = _config(ctx)
    handler = WireHandler(_scenes(scenes_path), _gold(dataset) if dataset else (), alpha=config.alpha)
    if stdio:
        served = serve_stdio(handler)
        logger.info(f"stdin closed after {served} requests")
        return
    console.print(f"🚀 Starting oracle server on {host}:{port}", style="blue")
    try:
        serve_http(handler, host=host, port=port)
    except Exception as e:
        _fail(f"Error starting server: {e}")


if __name__ == '__main__':
    main()
