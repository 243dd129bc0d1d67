"""Escritura de métricas por iteración en formato JSON Lines

Un registro por línea, claves ordenadas y sin timestamps: dos ejecuciones
con la misma semilla producen ficheros idénticos byte a byte.
"""
import json
from pathlib import Path
from typing import Dict, List, Union

import pandas as pd


class MetricsWriter:
    """Escribe métricas de entrenamiento en un fichero .jsonl"""

    def __init__(self, path: Union[str, Path], append: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._handle = open(self.path, 'a' if append else 'w', encoding='utf-8')
        self.rows_written = 0

    def write(self, record: Dict) -> None:
        """Añade un registro y lo vuelca a disco"""
        self._handle.write(json.dumps(record, sort_keys=True) + '\n')
        self._handle.flush()
        self.rows_written += 1

    def close(self) -> None:
        if not self._handle.closed:
            self._handle.close()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.close()


def read_metrics(path: Union[str, Path]) -> pd.DataFrame:
    """Carga un fichero de métricas como DataFrame"""
    path = Path(path)
    if not path.exists() or path.stat().st_size == 0:
        return pd.DataFrame()
    return pd.read_json(path, lines=True)


def truncate_metrics(path: Union[str, Path], keep_iterations: int) -> List[str]:
    """Recorta un fichero de métricas a las primeras keep_iterations filas

    Se usa al reanudar desde un checkpoint para no duplicar iteraciones.
    """
    path = Path(path)
    if not path.exists():
        return []
    lines = path.read_text(encoding='utf-8').splitlines(keepends=True)
    kept = lines[:keep_iterations]
    path.write_text(''.join(kept), encoding='utf-8')
    return kept
