import configparser
import hashlib
import json
import logging
import os
import platform
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger("datamanager")

CSV_FORMAT = "%.12g"
KV_SECTION = "params"


class DataManager:
    """Manages every file a run writes into its output directory"""

    def __init__(self, out_dir: str):
        self.out_dir = out_dir
        self.written: List[str] = []

    def get_data_dir(self):
        """Create the output directory on first use"""
        try:
            os.makedirs(self.out_dir, exist_ok=True)
        except OSError as e:
            logger.error(f"❌ Cannot create output directory {self.out_dir}: {e}")
            raise
        return self.out_dir

    def get_file_path(self, filename):
        """Get full path for a data file inside the output directory"""
        return os.path.join(self.get_data_dir(), filename)

    def track(self, filename):
        """Record a file in the manifest output list"""
        if filename not in self.written:
            self.written.append(filename)

    # -----------------------
    # JSON
    # -----------------------
    def save_json(self, filename, data):
        """Save data to a JSON file, returns the path"""
        file_path = self.get_file_path(filename)
        with open(file_path, "w", encoding="utf-8") as f:
            json.dump(data, f, indent=2, sort_keys=True)
            f.write("\n")
        self.track(filename)
        logger.info(f"💾 Saved {filename} to {file_path}")
        return file_path

    def load_json(self, filename, default=None):
        """Load data from a JSON file, ``default`` when it does not exist"""
        file_path = self.get_file_path(filename)
        if not os.path.exists(file_path):
            logger.warning(f"⚠️  {filename} not found, using default")
            return default
        with open(file_path, "r", encoding="utf-8") as f:
            return json.load(f)

    # -----------------------
    # CSV
    # -----------------------
    @staticmethod
    def write_csv(path: str, header: Sequence[str], columns, fmt: str = CSV_FORMAT):
        """Write equal-length columns with a one-line header"""
        data = np.column_stack([np.asarray(c, dtype=float) for c in columns])
        np.savetxt(path, data, delimiter=",", header=",".join(header), comments="", fmt=fmt)

    @staticmethod
    def read_csv(path: str) -> Tuple[List[str], np.ndarray]:
        """Header names and a 2-D float array"""
        with open(path, "r", encoding="utf-8") as f:
            header = [h.strip() for h in f.readline().strip().split(",")]
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return header, data

    def save_csv(self, filename, header, columns, fmt: str = CSV_FORMAT):
        file_path = self.get_file_path(filename)
        self.write_csv(file_path, header, columns, fmt)
        self.track(filename)
        logger.info(f"💾 Saved {filename} to {file_path}")
        return file_path

    def load_csv(self, filename):
        return self.read_csv(self.get_file_path(filename))

    # -----------------------
    # JSON lines
    # -----------------------
    def append_jsonl(self, filename, row: Dict):
        """Append one record and flush it to disk"""
        file_path = self.get_file_path(filename)
        with open(file_path, "a", encoding="utf-8") as f:
            f.write(json.dumps(row, sort_keys=True) + "\n")
            f.flush()
            os.fsync(f.fileno())
        self.track(filename)

    def read_jsonl(self, filename) -> List[Dict]:
        """Read complete records; a torn last line is cut off the file"""
        file_path = self.get_file_path(filename)
        if not os.path.exists(file_path):
            return []
        rows = []
        good_bytes = 0
        with open(file_path, "rb") as f:
            raw = f.read()
        for line in raw.splitlines(keepends=True):
            if not line.endswith(b"\n"):
                break
            try:
                rows.append(json.loads(line.decode("utf-8")))
            except (json.JSONDecodeError, UnicodeDecodeError):
                break
            good_bytes += len(line)
        if good_bytes < len(raw):
            logger.warning(
                f"⚠️  Truncating {len(raw) - good_bytes} bytes of partial record in {filename}"
            )
            with open(file_path, "r+b") as f:
                f.truncate(good_bytes)
        self.track(filename)
        return rows

    # -----------------------
    # Manifest
    # -----------------------
    @staticmethod
    def sha256_text(text: str) -> str:
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def write_manifest(self, command: str, config_text: str, seed: Optional[int]):
        """Config hash, seed and library versions for everything written so far"""
        import matplotlib
        import scipy

        manifest = {
            "command": command,
            "config_sha256": self.sha256_text(config_text),
            "seed": seed,
            "versions": {
                "python": platform.python_version(),
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "matplotlib": matplotlib.__version__,
            },
            "outputs": sorted(self.written),
        }
        return self.save_json("manifest.json", manifest)

    # -----------------------
    # key = value files
    # -----------------------
    @staticmethod
    def read_kv(path: str) -> Dict[str, str]:
        """Flat ``key = value`` file without section headers"""
        if not os.path.exists(path):
            raise FileNotFoundError(f"config file not found: {path}")
        parser = configparser.ConfigParser(
            interpolation=None, inline_comment_prefixes=("#",), delimiters=("=",)
        )
        parser.optionxform = str
        with open(path, "r", encoding="utf-8") as f:
            parser.read_string(f"[{KV_SECTION}]\n" + f.read(), source=path)
        return dict(parser[KV_SECTION])

    @staticmethod
    def write_kv(path: str, items: Dict[str, str], comments: Optional[Dict[str, str]] = None):
        comments = comments or {}
        lines = []
        for key, value in items.items():
            if key in comments:
                lines.append(f"# {key}: {comments[key]}")
            lines.append(f"{key} = {value}")
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(lines) + "\n")

    def save_kv(self, filename, items: Dict[str, str], comments: Optional[Dict[str, str]] = None):
        file_path = self.get_file_path(filename)
        self.write_kv(file_path, items, comments)
        self.track(filename)
        logger.info(f"💾 Saved {filename} to {file_path}")
        return file_path
