from pathlib import Path

from sqlalchemy import create_engine
from sqlalchemy.engine import Engine
from sqlalchemy.orm import sessionmaker

# the run catalogue lives next to the artifacts it describes
CATALOGUE_NAME = "runs.db"


def catalogue_path(out_dir: Path) -> Path:
    return Path(out_dir) / CATALOGUE_NAME


def make_engine(out_dir: Path, echo: bool = False) -> Engine:
    return create_engine(f"sqlite:///{catalogue_path(out_dir)}", echo=echo)


def make_session_factory(engine: Engine) -> sessionmaker:
    return sessionmaker(bind=engine, autoflush=False, autocommit=False, future=True)
