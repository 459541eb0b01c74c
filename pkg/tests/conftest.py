"""Shared fixtures: the built-in taxonomy and one default synthetic dataset.

The dataset is generated once per session (about a second) and reused by
the data, training, retrieval, and acceptance suites.
"""

import pytest

from sake.data import default_split, generate_dataset
from sake.taxonomy import (builtin_class_map_path, builtin_taxonomy_path,
                           load_class_map, load_taxonomy)


@pytest.fixture(scope="session")
def tax():
    return load_taxonomy(builtin_taxonomy_path())


@pytest.fixture(scope="session")
def class_map(tax):
    return load_class_map(builtin_class_map_path(), tax)


@pytest.fixture(scope="session")
def dataset(tax, class_map):
    return generate_dataset(default_split(0), tax, class_map)
