import glob
import os
import tempfile
from typing import List, Tuple

import streamlit as st

from src.vessel_refine.config import PipelineConfig, load_config
from src.vessel_refine.errors import RefineError
from src.vessel_refine.evalmetrics import ImageReport, auc, confusion, refinement_report
from src.vessel_refine.pipeline import RefinementPipeline
from src.vessel_refine.raster import agreement_map, load_raster
from src.vessel_refine.storage import ResultStore
from src.vessel_refine.tensornet import file_sha256


st.set_page_config(page_title="Vessel Label Refinement", layout="wide")


@st.cache_resource
def get_pipeline(checkpoint: str, config_path: str) -> RefinementPipeline:
    cfg = load_config(config_path) if config_path else PipelineConfig()
    return RefinementPipeline.from_checkpoint(checkpoint, cfg.refine, cfg.postproc)


@st.cache_resource
def get_store() -> ResultStore:
    return ResultStore(db_path="data/results.db")


def list_config_files() -> List[Tuple[str, str]]:
    base = "config"
    items: List[Tuple[str, str]] = []
    if not os.path.isdir(base):
        return items
    for fn in os.listdir(base):
        if fn.lower().endswith(".json"):
            items.append((fn, os.path.join(base, fn)))
    return sorted(items)


def list_checkpoints(root: str) -> List[str]:
    return sorted(glob.glob(os.path.join(root, "**", "*.lprf"), recursive=True))


def load_upload(upload, kind: str):
    # load_raster dispatches on the file extension
    suffix = os.path.splitext(upload.name)[1]
    with tempfile.NamedTemporaryFile(suffix=suffix, delete=False) as tmp:
        tmp.write(upload.getvalue())
        path = tmp.name
    try:
        return load_raster(path, kind)
    finally:
        os.remove(path)


st.title("Vessel Label Refinement")
st.markdown("Upload a fundus patch with its noisy vessel label and inspect each refinement round.")

with st.sidebar:
    st.header("Settings")
    runs_dir = st.text_input("Checkpoint folder", value="runs")
    checkpoints = list_checkpoints(runs_dir)
    checkpoint = st.selectbox("Checkpoint", options=checkpoints) if checkpoints else None
    configs = list_config_files()
    selected = st.selectbox("Pipeline config", options=["Defaults"] + [c[0] for c in configs])
    config_path = dict(configs).get(selected, "")
    save_to_db = st.checkbox("Save metrics to DB", value=False)
    st.markdown("DB path: data/results.db")

image_file = st.file_uploader("Fundus image", type=["png", "pgm", "ppm"])
label_file = st.file_uploader("Noisy label", type=["png", "pgm"])
gt_file = st.file_uploader("Reference label (optional)", type=["png", "pgm"])

if not checkpoint:
    st.info(f"No checkpoints found under '{runs_dir}'. Train one with scripts/cli.py train.")
elif image_file and label_file:
    try:
        pipeline = get_pipeline(checkpoint, config_path)
        image = load_upload(image_file, "image")
        label = load_upload(label_file, "label")
        outcome = pipeline.run(image, label, item_id=image_file.name, keep_iterations=True)
    except RefineError as e:
        st.error(str(e))
        st.stop()

    st.subheader("Refinement rounds")
    cols = st.columns(len(outcome.iterations) + 1)
    cols[0].image(label.data * 255, caption="input label", clamp=True)
    for i, prob in enumerate(outcome.iterations, start=1):
        cols[i].image(prob.data, caption=f"round {i}", clamp=True)

    st.subheader("Post-processing")
    cols = st.columns(3)
    cols[0].image(outcome.post.binary.data * 255, caption=f"Otsu (t={outcome.post.threshold:.3f})", clamp=True)
    cols[1].image(outcome.post.cleaned.data * 255, caption=f"cleaned (min size {outcome.post.min_size})", clamp=True)
    cols[2].image(agreement_map(outcome.post.cleaned, label).data, caption="refined vs input", clamp=True)
    st.write({
        "removed_components": len(outcome.post.removed_sizes),
        "removed_pixels": sum(outcome.post.removed_sizes),
    })

    if gt_file:
        gt = load_upload(gt_file, "label")
        try:
            area = auc(outcome.prob, gt)
        except RefineError:
            area = None
        report = ImageReport(image_file.name, confusion(outcome.post.cleaned, gt), area,
                             refinement_report(gt, label, outcome.post.cleaned))
        m = report.metrics
        st.markdown("### Metrics")
        st.write({
            "acc": m.acc, "se": m.se, "sp": m.sp, "auc": area,
            "iou_noisy": report.refinement.iou_noisy, "iou_refined": report.refinement.iou_refined,
            "delta": report.refinement.delta,
        })
        if st.button("Save metrics") and save_to_db:
            cfg = load_config(config_path) if config_path else PipelineConfig()
            run_id = get_store().save_run("review", cfg.to_dict(), [report], file_sha256(checkpoint))
            st.success(f"Saved with run_id={run_id}")
