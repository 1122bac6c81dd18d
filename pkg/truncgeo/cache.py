import json
import logging
import os
from typing import Optional

from peewee import SQL, AutoField, CharField, Model, OperationalError, SqliteDatabase, TextField
from tenacity import retry, retry_if_exception_type, stop_after_attempt, wait_exponential

from truncgeo.export import to_serializable

# the database is initialized by the command line, never at import
db = SqliteDatabase(None)
logger = logging.getLogger(__name__)


class _CellCache(Model):
    id = AutoField()
    kind = CharField(max_length=20)
    identity = TextField()
    result = TextField()

    class Meta:
        database = db
        constraints = [
            SQL(
                """
            UNIQUE (
                kind,
                identity
                )
            ON CONFLICT REPLACE
            """
            )
        ]


class CellCache:
    """Results of experiment cells keyed by the canonical JSON of their identity."""

    @staticmethod
    def _sort_dict_recursively(obj):
        if isinstance(obj, dict):
            return {k: CellCache._sort_dict_recursively(obj[k]) for k in sorted(obj.keys())}
        elif isinstance(obj, list):
            return [CellCache._sort_dict_recursively(item) for item in obj]
        return obj

    def __init__(self, kind: str):
        assert len(kind) < 20, "cache kinds are limited to 20 characters"
        self.kind = kind

    @staticmethod
    def enabled() -> bool:
        return _CellCache._meta.database.database is not None

    def _key(self, identity: dict) -> str:
        return json.dumps(self._sort_dict_recursively(to_serializable(identity)))

    # peewee and sqlite are thread-safe, so get and set need no locks
    def get(self, identity: dict) -> Optional[dict]:
        if not self.enabled():
            return None
        row = _CellCache.get_or_none(kind=self.kind, identity=self._key(identity))
        if row is None:
            return None
        logger.debug(f"cache hit for {self.kind} cell {identity.get('prior')} n={identity.get('n')}")
        return json.loads(row.result)

    @retry(
        retry=retry_if_exception_type(OperationalError),
        stop=stop_after_attempt(5),
        wait=wait_exponential(multiplier=0.2, max=5),
        reraise=True,
    )
    def _write(self, key: str, result: str):
        _CellCache.create(kind=self.kind, identity=key, result=result)

    def set(self, identity: dict, result: dict):
        if not self.enabled():
            return
        try:
            self._write(self._key(identity), json.dumps(to_serializable(result)))
        except OperationalError as e:
            logger.warning(f"Error setting cache: {e}")


def cache_path() -> str:
    cache_folder = os.path.join(os.path.expanduser("~"), ".cache", "truncgeo")
    # no migrations; the schema version is part of the file name
    return os.path.join(cache_folder, "cache.v1.db")


def init_db(remove_exists=False, path: Optional[str] = None):
    cache_db_path = path or cache_path()
    os.makedirs(os.path.dirname(cache_db_path), exist_ok=True)
    if remove_exists and os.path.exists(cache_db_path):
        os.remove(cache_db_path)
    db.init(
        cache_db_path,
        pragmas={
            "journal_mode": "wal",
            "busy_timeout": 1000,
        },
    )
    db.create_tables([_CellCache], safe=True)


def init_test_db():
    import tempfile

    cache_db_path = tempfile.mktemp(suffix=".db")
    test_db = SqliteDatabase(
        cache_db_path,
        pragmas={
            "journal_mode": "wal",
            "busy_timeout": 1000,
        },
    )
    test_db.bind([_CellCache], bind_refs=False, bind_backrefs=False)
    test_db.connect()
    test_db.create_tables([_CellCache], safe=True)
    return test_db


def clean_test_db(test_db):
    test_db.drop_tables([_CellCache])
    test_db.close()
    db_path = test_db.database
    for path in (db_path, db_path + "-wal", db_path + "-shm"):
        if os.path.exists(path):
            os.remove(path)
    db.bind([_CellCache], bind_refs=False, bind_backrefs=False)
