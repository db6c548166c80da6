"""FastAPI service wrapping the local-mapping engine.

One-shot benchmark endpoints (generate / run / compare / ate) operate on
server-local file paths; session endpoints stream keyframes into a live
pipeline, the way a tracking front-end would feed local mapping.
"""

from __future__ import annotations

import threading
import uuid

import numpy as np
from fastapi import FastAPI, HTTPException

from .. import __version__
from ..config import PipelineConfig
from ..errors import LocalMapError, InvalidArgumentError, InsufficientDataError
from ..geometry import SE3Pose, CameraIntrinsics
from ..mapmodel import KeyFrame
from ..pipeline import LocalMappingPipeline, run_sequence
from ..report import (
    compare_reports,
    evaluate_ate_against_truth,
    file_sha256,
    format_comparison_table,
    read_json,
    summarize_runs,
    write_json,
)
from ..synth import WorldConfig, generate_sequence, read_sequence, write_sequence
from ..trajectory import associate, ate_rmse, read_trajectory, write_trajectory
from . import schemas


class SessionState:
    def __init__(self, pipeline: LocalMappingPipeline):
        self.pipeline = pipeline
        self.lock = threading.Lock()


def create_app() -> FastAPI:
    app = FastAPI(title="localmap", version=__version__)
    sessions: dict[str, SessionState] = {}
    sessions_lock = threading.Lock()

    def get_session(session_id: str) -> SessionState:
        with sessions_lock:
            state = sessions.get(session_id)
        if state is None:
            raise HTTPException(status_code=404, detail=f"unknown session {session_id}")
        return state

    @app.get("/health", response_model=schemas.HealthResponse)
    def health():
        return schemas.HealthResponse(status="ok", version=__version__)

    @app.post("/sequences/generate", response_model=schemas.GenerateResponse)
    def generate(req: schemas.GenerateRequest):
        try:
            cfg = WorldConfig(
                seed=req.seed,
                landmark_count=req.landmarks,
                keyframe_count=req.keyframes,
                features_per_kf=req.features,
                pixel_noise_sigma=req.noise,
                duplicate_injection_rate=req.duplicates,
                trajectory=req.trajectory,
                extent=req.extent,
                descriptor_flip_bits=req.descriptor_flip_bits,
                spurious_feature_fraction=req.spurious_fraction,
                twin_flip_bits=req.twin_flip_bits,
                pose_noise_trans=req.pose_noise_trans,
                pose_noise_rot_deg=req.pose_noise_rot_deg,
                min_covisible=req.min_covisible,
            )
            seq = generate_sequence(cfg)
            write_sequence(seq, req.out)
            gt_path = None
            if req.write_gt:
                gt_path = req.out + ".gt.txt"
                write_trajectory(
                    gt_path, [(float(r.frame_index), r.pose_gt) for r in seq.records]
                )
        except LocalMapError as err:
            raise HTTPException(status_code=400, detail=str(err))
        except OSError as err:
            raise HTTPException(status_code=400, detail=f"cannot write output: {err}")
        return schemas.GenerateResponse(
            path=req.out,
            gt_path=gt_path,
            keyframes=len(seq.records),
            landmarks=len(seq.landmarks),
            duplicate_pairs=len(seq.duplicate_pairs),
            sha256=file_sha256(req.out),
        )

    @app.post("/runs", response_model=schemas.RunResponse)
    def run(req: schemas.RunRequest):
        try:
            seq = read_sequence(req.seq)
        except OSError as err:
            raise HTTPException(status_code=400, detail=f"cannot read sequence: {err}")
        except LocalMapError as err:
            raise HTTPException(status_code=400, detail=str(err))
        try:
            results = []
            for _ in range(req.repeat):
                cfg = PipelineConfig(
                    mode=req.mode,
                    worker_count=req.workers,
                    stress=req.stress,
                    queue_capacity=req.queue_capacity,
                    min_kf_interval_frames=req.min_kf_interval_frames,
                    force_skip_lba=req.force_skip_lba,
                    force_skip_culling=req.force_skip_culling,
                )
                if req.match_max_distance is not None:
                    cfg.match.match_max_distance = req.match_max_distance
                if req.triangulation_neighbors is not None:
                    cfg.match.neighbor_count = req.triangulation_neighbors
                if req.fuse_max_distance is not None:
                    cfg.fuse.match_max_distance = req.fuse_max_distance
                if req.fuse_n1 is not None:
                    cfg.fuse.n1 = req.fuse_n1
                if req.fuse_n2 is not None:
                    cfg.fuse.n2 = req.fuse_n2
                results.append(run_sequence(seq, cfg))
            ate, poses = evaluate_ate_against_truth(results[0], seq)
            report = summarize_runs(
                results,
                sequence_path=req.seq,
                sequence_sha256=file_sha256(req.seq),
                ate=ate,
                ate_poses=poses,
            )
            if req.out:
                write_json(report, req.out)
            if req.traj:
                write_trajectory(req.traj, results[0].trajectory)
        except ValueError as err:
            raise HTTPException(status_code=400, detail=str(err))
        except LocalMapError as err:
            raise HTTPException(status_code=500, detail=f"run failed: {err}")
        except OSError as err:
            raise HTTPException(status_code=400, detail=f"cannot write output: {err}")
        return schemas.RunResponse(report=report, out_path=req.out, traj_path=req.traj)

    @app.post("/reports/compare", response_model=schemas.CompareResponse)
    def compare(req: schemas.CompareRequest):
        try:
            base = req.baseline_report or (req.baseline and read_json(req.baseline))
            opt = req.optimized_report or (req.optimized and read_json(req.optimized))
            if not base or not opt:
                raise InvalidArgumentError("both baseline and optimized reports required")
            cmp = compare_reports(base, opt)
            table = format_comparison_table(cmp) if req.table else None
            if req.out:
                write_json(cmp, req.out)
        except (LocalMapError, OSError, KeyError, ValueError) as err:
            raise HTTPException(status_code=400, detail=str(err))
        return schemas.CompareResponse(report=cmp, table=table, out_path=req.out)

    @app.post("/evaluate/ate", response_model=schemas.AteResponse)
    def evaluate(req: schemas.AteRequest):
        try:
            est, gt = associate(read_trajectory(req.traj), read_trajectory(req.gt))
            rmse = ate_rmse(est, gt, align_scale=req.align_scale)
        except InsufficientDataError as err:
            raise HTTPException(status_code=400, detail=str(err))
        except (LocalMapError, OSError) as err:
            raise HTTPException(status_code=400, detail=str(err))
        return schemas.AteResponse(rmse_m=rmse, poses=len(est))

    # --- streaming sessions ------------------------------------------------

    @app.post("/sessions", response_model=schemas.SessionCreateResponse)
    def create_session(req: schemas.SessionCreateRequest):
        try:
            cfg = PipelineConfig(
                mode=req.mode,
                worker_count=req.workers,
                queue_capacity=req.queue_capacity,
                min_kf_interval_frames=req.min_kf_interval_frames,
                force_skip_lba=req.force_skip_lba,
                force_skip_culling=req.force_skip_culling,
            )
        except ValueError as err:
            raise HTTPException(status_code=400, detail=str(err))
        session_id = uuid.uuid4().hex[:12]
        with sessions_lock:
            sessions[session_id] = SessionState(
                LocalMappingPipeline(cfg, num_levels=req.num_levels)
            )
        return schemas.SessionCreateResponse(session_id=session_id)

    @app.post("/sessions/{session_id}/keyframes", response_model=schemas.EnqueueResponse)
    def push_keyframe(session_id: str, payload: schemas.KeyframePayload):
        state = get_session(session_id)
        try:
            desc = np.frombuffer(bytes.fromhex(payload.descriptors_hex), dtype=np.uint8)
            kf = KeyFrame(
                kf_id=payload.kf_id,
                pose=SE3Pose(np.array(payload.pose.q), np.array(payload.pose.t)),
                intrinsics=CameraIntrinsics(
                    fx=payload.fx,
                    fy=payload.fy,
                    cx=payload.cx,
                    cy=payload.cy,
                    width=payload.width,
                    height=payload.height,
                    num_levels=payload.num_levels,
                    scale_factor=payload.scale_factor,
                ),
                kp_u=np.array(payload.kp_u),
                kp_v=np.array(payload.kp_v),
                kp_level=np.array(payload.kp_level, dtype=np.int64),
                descriptors=desc.reshape(-1, 32).copy(),
                frame_index=payload.frame_index,
            )
        except (LocalMapError, ValueError) as err:
            raise HTTPException(status_code=400, detail=str(err))
        with state.lock:
            accepted = state.pipeline.admit(kf)
            depth = len(state.pipeline.queue)
        return schemas.EnqueueResponse(accepted=accepted, queue_depth=depth)

    @app.post("/sessions/{session_id}/process", response_model=schemas.ProcessResponse)
    def process(session_id: str, req: schemas.ProcessRequest):
        state = get_session(session_id)
        done = []
        with state.lock:
            pipe = state.pipeline
            budget = req.max_keyframes or len(pipe.queue)
            try:
                while pipe.queue and len(done) < budget:
                    done.append(pipe.process_one().as_dict())
            except LocalMapError as err:
                raise HTTPException(status_code=500, detail=f"processing failed: {err}")
            return schemas.ProcessResponse(
                processed=len(done),
                timings=done,
                live_keyframes=len(pipe.model.live_keyframes()),
                live_points=len(pipe.model.live_points()),
            )

    @app.get("/sessions/{session_id}/report", response_model=schemas.SessionReportResponse)
    def session_report(session_id: str):
        state = get_session(session_id)
        with state.lock:
            pipe = state.pipeline
            if not pipe.timings:
                raise HTTPException(status_code=400, detail="no keyframes processed yet")
            fake_result = _result_view(pipe)
            report = summarize_runs([fake_result])
        return schemas.SessionReportResponse(report=report)

    @app.get("/sessions/{session_id}/trajectory", response_model=schemas.TrajectoryResponse)
    def session_trajectory(session_id: str):
        state = get_session(session_id)
        with state.lock:
            rows = []
            for kf in sorted(state.pipeline.model.live_keyframes(), key=lambda k: k.kf_id):
                inv = kf.pose.inverse()
                rows.append(
                    {
                        "timestamp": float(kf.frame_index),
                        "t": [float(x) for x in inv.trans],
                        "q": [float(x) for x in inv.quat],
                    }
                )
        return schemas.TrajectoryResponse(rows=rows)

    @app.delete("/sessions/{session_id}")
    def close_session(session_id: str):
        with sessions_lock:
            state = sessions.pop(session_id, None)
        if state is None:
            raise HTTPException(status_code=404, detail=f"unknown session {session_id}")
        state.pipeline.close()
        return {"closed": session_id}

    return app


def _result_view(pipe: LocalMappingPipeline):
    """RunResult-shaped view over a live session pipeline."""
    from ..pipeline import RunResult

    return RunResult(
        config=pipe.config,
        trajectory=[
            (float(kf.frame_index), kf.pose)
            for kf in sorted(pipe.model.live_keyframes(), key=lambda k: k.kf_id)
        ],
        timings=pipe.timings,
        skips=pipe.skips,
        store=pipe.store,
        model=pipe.model,
        ba_reports=pipe.ba_reports,
        fusion_totals=pipe.fusion_totals,
        creation_stats=pipe.creation_stats,
        culled_keyframes=pipe.culled_keyframes,
        culled_points=pipe.culled_points,
        audit_violations=pipe.model.audit(),
    )


app = create_app()
