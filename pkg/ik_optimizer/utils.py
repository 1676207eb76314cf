from typing import Any, List, Optional
import hashlib
import json
import logging
import os

import numpy as np

from .chain_model import Pose

logger = logging.getLogger(__name__)

QUATERNION_RENORM_TOLERANCE = 1e-6


class IKUtils:
    @staticmethod
    def digest_text(text: str) -> str:
        """SHA-256 hex digest of a UTF-8 string"""
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    @staticmethod
    def digest_file(path: str) -> str:
        h = hashlib.sha256()
        with open(path, "rb") as f:
            for block in iter(lambda: f.read(1 << 20), b""):
                h.update(block)
        return h.hexdigest()

    @staticmethod
    def digest_config(config: Any) -> str:
        """Digest of a configuration's canonical JSON form"""
        doc = config if isinstance(config, dict) else vars(config)
        return IKUtils.digest_text(json.dumps(doc, sort_keys=True, default=str))

    @staticmethod
    def ensure_parent(path: str):
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)

    @staticmethod
    def write_json(doc: dict, path: str):
        IKUtils.ensure_parent(path)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(doc, f, indent=2, sort_keys=True)
            f.write("\n")

    @staticmethod
    def parse_floats(text: str, count: Optional[int] = None, name: str = "value") -> List[float]:
        """Parse a comma-separated list of floats

        Args:
            text: e.g. "0.2,-0.9,0.8"
            count: Required number of values, None accepts any
            name: Used in error messages

        Returns:
            List of floats
        """
        try:
            values = [float(v) for v in text.split(",") if v.strip()]
        except ValueError:
            raise ValueError(f"{name} must be comma-separated numbers, got {text!r}")
        if count is not None and len(values) != count:
            raise ValueError(f"{name} needs {count} values, got {len(values)}")
        if not all(np.isfinite(values)):
            raise ValueError(f"{name} contains non-finite values")
        return values

    @staticmethod
    def parse_pose(text: str) -> Pose:
        """Parse px,py,pz,qx,qy,qz,qw

        Quaternions within 1e-6 of unit norm are renormalized, others rejected.
        """
        values = np.array(IKUtils.parse_floats(text, 7, "pose"))
        norm = np.linalg.norm(values[3:])
        if abs(norm - 1.0) > QUATERNION_RENORM_TOLERANCE:
            raise ValueError(f"Pose quaternion norm {norm:.9g} is not within {QUATERNION_RENORM_TOLERANCE:g} of 1")
        if norm != 1.0:
            logger.warning("Renormalizing pose quaternion with norm %.12g", norm)
        values[3:] /= norm
        return Pose.from_array(values)
