import sys
from pathlib import Path

from sqlalchemy.engine import Engine

from app.db import catalogue_path, make_engine
from app.models import Base


def init_db(engine: Engine) -> None:
    Base.metadata.create_all(engine)


def main(argv=None) -> int:
    args = sys.argv[1:] if argv is None else argv
    out_dir = Path(args[0] if args else "out")
    out_dir.mkdir(parents=True, exist_ok=True)
    init_db(make_engine(out_dir))
    print(f"Run catalogue ready at {catalogue_path(out_dir)}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
