import textwrap

import numpy as np
import pytest

from app import create_app, db
from mesh_graph import build_hierarchy, build_knn_graph, shell_point_cloud

SMALL_EXPERIMENT = """
[experiment]
name = "Desk Test"
master_seed = 7

[geometry]
n_vertices = 60
k = 6
depth = 2

[simulation]
t_end = 20.0

[measurement]
n_channels = 8

[data]
count = 40

[model]
channels = [4, 8]
kernel_size = [3, 3, 3]

[train]
epochs = 2
batch_size = 8

[bo]
budget = 4
n_init = 2
n_restarts = 2

[evaluate]
n_cases = 2
pca_max_q = 3

[transfer]
n_vertices = 50
data_sizes = [20]
epochs = 2
"""


@pytest.fixture
def app(tmp_path):
    app = create_app('testing')
    app.config['CARDIO_OUT'] = str(tmp_path / 'runs')
    with app.app_context():
        yield app
        db.session.remove()
        db.drop_all()


@pytest.fixture
def runner(app):
    return app.test_cli_runner()


@pytest.fixture
def client(app):
    return app.test_client()


@pytest.fixture
def experiment_file(tmp_path):
    path = tmp_path / 'experiment.toml'
    path.write_text(textwrap.dedent(SMALL_EXPERIMENT))
    return path


@pytest.fixture(scope='session')
def cube_points():
    return np.random.default_rng(0).random((10, 3))


@pytest.fixture(scope='session')
def shell_graph():
    return build_knn_graph(shell_point_cloud(300, seed=0), k=6)


@pytest.fixture(scope='session')
def small_graph():
    return build_knn_graph(shell_point_cloud(40, seed=1), k=6)


@pytest.fixture(scope='session')
def small_hierarchy(small_graph):
    return build_hierarchy(small_graph, 2)
