"""Persistent device-side keyframe storage model with a transfer ledger.

No device memory is allocated: the store keeps residency flags and byte
counts. The ledger tracks what the persistent strategy actually moves and,
counterfactually, what a naive re-transfer-per-use strategy would have
moved, so the two policies can be compared exactly on any run.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .config import StoreConfig
from .errors import InvalidArgumentError, InvalidStateError, StoreCapacityError
from .mapmodel import KeyFrame


@dataclass
class StoredKeyFrame:
    kf_id: int
    payload_bytes: int
    resident: bool = True


@dataclass
class TransferLedger:
    persistent_bytes_up: int = 0
    naive_bytes_up: int = 0
    per_stage_small_transfers: list[tuple[str, int]] = field(default_factory=list)
    evictions: int = 0

    def as_dict(self) -> dict:
        small: dict[str, int] = {}
        for stage, nbytes in self.per_stage_small_transfers:
            small[stage] = small.get(stage, 0) + nbytes
        ratio = (
            self.naive_bytes_up / self.persistent_bytes_up
            if self.persistent_bytes_up > 0
            else 0.0
        )
        return {
            "persistent_bytes_up": self.persistent_bytes_up,
            "naive_bytes_up": self.naive_bytes_up,
            "naive_over_persistent": ratio,
            "small_transfer_bytes_by_stage": small,
            "small_transfer_events": len(self.per_stage_small_transfers),
            "evictions": self.evictions,
        }


class DeviceStore:
    def __init__(self, config: StoreConfig | None = None):
        self.config = config or StoreConfig()
        self.ledger = TransferLedger()
        self._stored: dict[int, StoredKeyFrame] = {}

    def payload_bytes(self, num_keypoints: int) -> int:
        c = self.config
        return num_keypoints * c.keypoint_record_bytes + num_keypoints * c.descriptor_bytes

    def is_resident(self, kf_id: int) -> bool:
        entry = self._stored.get(kf_id)
        return entry is not None and entry.resident

    def resident_count(self) -> int:
        return sum(1 for e in self._stored.values() if e.resident)

    def upload_keyframe(self, kf: KeyFrame) -> StoredKeyFrame:
        if self.is_resident(kf.kf_id):
            raise InvalidStateError(f"keyframe {kf.kf_id} already resident")
        if self.resident_count() >= self.config.capacity:
            raise StoreCapacityError(
                f"store capacity {self.config.capacity} exceeded; size the pre-allocation"
            )
        entry = StoredKeyFrame(kf.kf_id, self.payload_bytes(kf.num_keypoints))
        self._stored[kf.kf_id] = entry
        self.ledger.persistent_bytes_up += entry.payload_bytes
        return entry

    def record_neighbor_access(self, stage: str, neighbor_ids: list[int]) -> int:
        """Persistent strategy moves nothing; the naive counterfactual re-sends
        every accessed neighbor. Returns the naive delta in bytes."""
        delta = 0
        for kf_id in neighbor_ids:
            entry = self._stored.get(kf_id)
            if entry is None or not entry.resident:
                raise InvalidStateError(
                    f"stage {stage!r} accessed non-resident keyframe {kf_id}"
                )
            delta += entry.payload_bytes
        self.ledger.naive_bytes_up += delta
        return delta

    def record_small_transfer(self, stage: str, nbytes: int):
        """Both strategies move these payloads; only keyframe re-transfers
        differ between them, so small transfers land in both counters."""
        if nbytes < 0:
            raise InvalidArgumentError("transfer size must be non-negative")
        self.ledger.per_stage_small_transfers.append((stage, nbytes))
        self.ledger.persistent_bytes_up += nbytes
        self.ledger.naive_bytes_up += nbytes

    def evict_keyframe(self, kf_id: int) -> StoredKeyFrame:
        entry = self._stored.get(kf_id)
        if entry is None or not entry.resident:
            raise InvalidArgumentError(f"keyframe {kf_id} is not resident")
        entry.resident = False
        self.ledger.evictions += 1
        return entry
