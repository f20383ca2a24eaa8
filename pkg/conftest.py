"""
Shared fixtures: one small hand-built scene, its oracle binding and three
template paths synthesized over it.

Scene "s1" (100 x 100):
    e1 bus     (10,10)-(40,40)  yellow
    e2 sign    (15,15)-(25,20)  white, text STOP   (inside the bus)
    e3 person  (60,60)-(70,80)  red
    e4 person  (72,60)-(80,80)  blue              (2 px right of e3)
    e5 dog     (85,10)-(95,20)  brown, confidence 0.4
"""

from typing import Dict, List, Sequence

import pytest

from reasonforge.scene import BBox, Entity, Scene, SceneSet, write_scenes
from reasonforge.synthesis import (
    Chain,
    Node,
    ReasoningPath,
    TemplateCombiner,
    TemplateQuestioner,
    build_nodes,
    recognize_entities,
    synthesize_path,
)
from reasonforge.tools import ToolBackendBinding, ToolKind


# Property checks run a quick sample by default; --runslow runs the full size.
PROPERTY_RUNS = [300, pytest.param(10_000, marks=pytest.mark.slow)]


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run full-size property checks")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: full-size property checks, enabled with --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def make_scene() -> Scene:
    return Scene(
        id="s1",
        width=100,
        height=100,
        entities=(
            Entity(id="e1", label="bus", bbox=BBox.of(10, 10, 40, 40), confidence=0.9, color="yellow"),
            Entity(id="e2", label="sign", bbox=BBox.of(15, 15, 25, 20), confidence=0.8, color="white",
                   text=("STOP",)),
            Entity(id="e3", label="person", bbox=BBox.of(60, 60, 70, 80), confidence=0.95, color="red"),
            Entity(id="e4", label="person", bbox=BBox.of(72, 60, 80, 80), confidence=0.9, color="blue"),
            Entity(id="e5", label="dog", bbox=BBox.of(85, 10, 95, 20), confidence=0.4, color="brown"),
        ),
    )


@pytest.fixture
def scene() -> Scene:
    return make_scene()


@pytest.fixture
def scenes(scene) -> SceneSet:
    return SceneSet([scene])


@pytest.fixture
def oracle(scenes) -> ToolBackendBinding:
    return ToolBackendBinding.oracle(scenes, alpha=0.2)


@pytest.fixture
def scene_file(tmp_path, scenes):
    return write_scenes(scenes, tmp_path / "scenes.json")


@pytest.fixture
def nodes(scene) -> Dict[str, Node]:
    return {n.id: n for n in build_nodes(scene, recognize_entities(scene), delta=0.05)}


def chain_of(nodes: Dict[str, Node], ids: Sequence[str], tools: Sequence[ToolKind]) -> Chain:
    return Chain(nodes=tuple(nodes[i] for i in ids), edge_tools=tuple(tools))


def template_path(scene: Scene, chain: Chain, path_id: str) -> ReasoningPath:
    return synthesize_path(chain, TemplateQuestioner(), TemplateCombiner(), scene, alpha=0.2, path_id=path_id)


@pytest.fixture
def sign_path(scene, nodes) -> ReasoningPath:
    """Ground the bus, read the sign on it, answer from the characters"""
    chain = chain_of(nodes, ["entity:e2", "entity:e1", "whole"], [ToolKind.OCR, ToolKind.GROUNDING])
    return template_path(scene, chain, "s1-0")


@pytest.fixture
def color_path(scene, nodes) -> ReasoningPath:
    """Highlight the persons, then ask the color of the larger one"""
    chain = chain_of(nodes, ["entity:e3", "group:2", "whole"], [ToolKind.ANSWER, ToolKind.HIGHLIGHT])
    return template_path(scene, chain, "s1-1")


@pytest.fixture
def count_path(scene, nodes) -> ReasoningPath:
    chain = chain_of(nodes, ["group:2", "whole"], [ToolKind.ANSWER])
    return template_path(scene, chain, "s1-2")


@pytest.fixture
def gold_paths(sign_path, color_path, count_path) -> List[ReasoningPath]:
    return [sign_path, color_path, count_path]
