from functools import wraps
import click
from flask import current_app
from app import db
from errors import CardioError, ConfigError


def exit_codes(f):
    """Report toolkit failures on stderr and exit with the failure's code."""
    @wraps(f)
    def decorated_function(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except (CardioError, ValueError) as e:
            db.session.rollback()
            code = e.exit_code if isinstance(e, CardioError) else ConfigError.exit_code
            current_app.logger.error(f"{f.__name__} failed: {e}")
            click.echo(f"error: {e}", err=True)
            raise click.exceptions.Exit(code)
    return decorated_function
