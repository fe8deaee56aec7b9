#!/usr/bin/env python3
"""
Core Utilities - stochesp
Centralized helpers for number formatting, atomic file output, hashing and
chunked path-parallel execution.
"""

import csv
import hashlib
import io
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Sequence, Tuple


class NumberUtilities:
    """Decimal text formatting used by every data file"""

    @staticmethod
    def format_float(value: Any) -> str:
        """17 significant digits: round-trips any IEEE double exactly"""
        if isinstance(value, bool):
            return "true" if value else "false"
        if isinstance(value, int):
            return str(value)
        return format(float(value), '.17g')

    @staticmethod
    def format_value(value: Any) -> str:
        if isinstance(value, (bool, int, float)):
            return NumberUtilities.format_float(value)
        try:
            import numpy as np
            if isinstance(value, np.generic):
                return NumberUtilities.format_float(value.item())
        except ImportError:
            pass
        if isinstance(value, (list, tuple)):
            return "[" + ", ".join(NumberUtilities.format_value(v) for v in value) + "]"
        return str(value)


class FileUtilities:
    """File operations: directories and atomic writes"""

    @staticmethod
    def ensure_directory_exists(directory_path) -> bool:
        """Ensure directory exists, create if necessary"""
        try:
            Path(directory_path).mkdir(parents=True, exist_ok=True)
            return True
        except Exception:
            return False

    @staticmethod
    def write_text_atomic(path, text: str) -> Path:
        """Write to a temp file in the target directory, then rename over the target"""
        target = Path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp_name = tempfile.mkstemp(prefix=f".{target.name}.", dir=str(target.parent))
        try:
            with os.fdopen(fd, 'w', newline='', encoding='utf-8') as f:
                f.write(text)
            os.replace(tmp_name, target)
        except Exception:
            if os.path.exists(tmp_name):
                os.remove(tmp_name)
            raise
        return target


class CsvUtilities:
    """RFC-4180 style CSV with a header row and 17-significant-digit decimals"""

    @staticmethod
    def render(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator='\r\n')
        writer.writerow(list(header))
        for row in rows:
            writer.writerow([NumberUtilities.format_value(v) for v in row])
        return buffer.getvalue()

    @staticmethod
    def write(path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
        return FileUtilities.write_text_atomic(path, CsvUtilities.render(header, rows))

    @staticmethod
    def read(path) -> Tuple[List[str], List[List[str]]]:
        with open(path, 'r', newline='', encoding='utf-8') as f:
            reader = csv.reader(f)
            rows = list(reader)
        if not rows:
            return [], []
        return rows[0], rows[1:]


class SummaryUtilities:
    """Flat `key = value` run summaries"""

    @staticmethod
    def render(summary: Dict[str, Any]) -> str:
        lines = [f"{key} = {NumberUtilities.format_value(summary[key])}" for key in sorted(summary)]
        return "\n".join(lines) + "\n"

    @staticmethod
    def parse(text: str) -> Dict[str, str]:
        parsed = {}
        for line in text.splitlines():
            if not line.strip() or line.lstrip().startswith('#'):
                continue
            key, _, value = line.partition('=')
            parsed[key.strip()] = value.strip()
        return parsed


class HashUtilities:
    @staticmethod
    def sha256_text(text: str) -> str:
        return hashlib.sha256(text.encode('utf-8')).hexdigest()


class ParallelUtilities:
    """Chunked path-parallel execution

    Chunk boundaries depend only on the chunk size, never on the thread count,
    so results are identical for any number of workers.
    """

    @staticmethod
    def chunk_bounds(n_items: int, chunk_size: int) -> List[Tuple[int, int]]:
        chunk_size = max(1, int(chunk_size))
        return [(start, min(start + chunk_size, n_items)) for start in range(0, n_items, chunk_size)]

    @staticmethod
    def map_chunks(func: Callable[[int, int], Any], n_items: int,
                   chunk_size: int, threads: int = 1) -> List[Any]:
        """Apply func(start, stop) to every chunk; results come back in chunk order"""
        bounds = ParallelUtilities.chunk_bounds(n_items, chunk_size)
        if threads <= 1 or len(bounds) <= 1:
            return [func(start, stop) for start, stop in bounds]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda b: func(*b), bounds))
