"""Paths to the bundled default graph and lexicon documents."""

from importlib import resources


def default_graph_path():
    return resources.files("kabb").joinpath("data/default_graph.json")


def default_lexicon_path():
    return resources.files("kabb").joinpath("data/default_lexicon.json")
