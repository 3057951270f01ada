from flask import Blueprint

pipeline_bp = Blueprint('pipeline', __name__, cli_group=None)

from . import commands
