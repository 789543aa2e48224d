import os
import warnings
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np
from tqdm import tqdm

from .dataset_synth import (
    DatasetSample,
    LineSegment,
    SamplerConfig,
    derive_seed,
    distort_image,
    distort_segments,
    render_line_map,
    sample_params,
)
from .errors import InputError
from .raster_io import (
    read_image,
    write_image,
    write_json,
    write_line_map,
    write_mask,
)
from .rasters import ImageBuffer
from .utils import parse_annotation_file

DEFAULT_SEED = 20190601

PathLike = Union[str, Path]


def prepare_source(
    src: ImageBuffer, segments: Sequence[LineSegment], size: Tuple[int, int]
) -> Tuple[ImageBuffer, List[LineSegment]]:
    """
    Resize a perspective source to the output raster (area interpolation) and
    scale its annotations to match. Segments that end up outside the raster
    are discarded.
    """
    width, height = size
    sx = width / float(src.width)
    sy = height / float(src.height)
    if src.size != size:
        data = cv2.resize(src.data, (width, height), interpolation=cv2.INTER_AREA)
        src = ImageBuffer(data)
    if src.channels == 1:
        src = ImageBuffer(np.repeat(src.data, 3, axis=2), src.valid)

    scaled = []
    for segment in segments:
        if (sx, sy) != (1.0, 1.0):
            # source pixel centres sit at (i + 0.5) / scale - 0.5 after resizing
            segment = LineSegment(
                ((segment.x[0] + 0.5) * sx - 0.5, (segment.x[1] + 0.5) * sy - 0.5),
                ((segment.x_prime[0] + 0.5) * sx - 0.5, (segment.x_prime[1] + 0.5) * sy - 0.5),
            )
        if segment.inside(width, height):
            scaled.append(segment)
    return src, scaled


class DatasetBuilder:
    """Generates fisheye samples from perspective sources and writes them to disk"""

    def __init__(
        self,
        out_dir: PathLike,
        config: Optional[SamplerConfig] = None,
        seed: int = DEFAULT_SEED,
        split: str = "train",
        progress: bool = True,
    ):
        self.out_dir = Path(out_dir)
        self.config = config or SamplerConfig()
        self.seed = int(seed)
        self.split = split
        self.progress = progress
        self.pinhole = self.config.pinhole()
        self.records: List[str] = []
        self.entries: List[Dict[str, Any]] = []
        self.total_dropped = 0

    def make_sample(
        self, src: ImageBuffer, segments: Sequence[LineSegment], index: int
    ) -> DatasetSample:
        """Distort one prepared source with the parameters drawn for sample `index`"""
        seed = derive_seed(self.seed, index)
        params = sample_params(seed, self.config)
        size = self.config.output_size

        fisheye = distort_image(src, params, self.pinhole, size)
        polylines, dropped = distort_segments(segments, params, self.pinhole, size)
        return DatasetSample(
            fisheye_image=fisheye,
            params=params,
            segments=list(segments),
            distorted_polylines=polylines,
            line_map_rectified=render_line_map(segments, size),
            line_map_distorted=render_line_map(polylines, size),
            seed=seed,
            pinhole=self.pinhole,
            dropped_polylines=dropped,
        )

    def write_sample(self, sample: DatasetSample, index: int, source_name: str) -> Path:
        """Write the PNGs, line maps and JSON record of one sample; returns the record path"""
        stem = f"sample_{index:05d}"
        image_path = write_image(self.out_dir / f"{stem}.png", sample.fisheye_image)
        mask_path = write_mask(self.out_dir / f"{stem}_mask.png", sample.fisheye_image.valid)
        distorted_path = write_line_map(
            self.out_dir / f"{stem}_distorted.lmap", sample.line_map_distorted
        )
        rectified_path = write_line_map(
            self.out_dir / f"{stem}_rectified.lmap", sample.line_map_rectified
        )

        record = {
            "image": image_path.name,
            "mask": mask_path.name,
            "line_map_distorted": distorted_path.name,
            "line_map_rectified": rectified_path.name,
            "source": source_name,
            "params": sample.params.to_dict(),
            "pinhole": sample.pinhole.to_dict(),
            "segments": [seg.to_list() for seg in sample.segments],
            "polylines": [poly.to_list() for poly in sample.distorted_polylines],
            "polyline_segments": [
                sample.segments.index(poly.source) for poly in sample.distorted_polylines
            ],
            "dropped_polylines": sample.dropped_polylines,
            "seed": sample.seed,
            "split": self.split,
        }
        return write_json(self.out_dir / f"{stem}.json", record)

    def print_header(self, source_count: int):
        width, height = self.config.output_size
        print("\n" + "=" * 60)
        print("Building Fisheye Dataset")
        print(f"Sources: {source_count}")
        print(f"Variants per source: {self.config.variants}")
        print(f"Output size: {width}x{height}")
        print(f"Pinhole focal: {self.pinhole.f:.3f} px")
        print(f"theta_max: {self.config.theta_max}")
        print(f"Seed: {self.seed}")
        print(f"Split: {self.split}")
        print(f"Output directory: {self.out_dir}")
        print("=" * 60)

    def print_footer(self):
        print("-" * 50)
        print(f"Samples written: {len(self.records)}")
        if self.total_dropped:
            print(f"Segments dropped outside the fisheye raster: {self.total_dropped}")
        print("=" * 60)

    def run(
        self, sources: Sequence[Tuple[str, ImageBuffer, Sequence[LineSegment]]]
    ) -> Dict[str, Any]:
        """
        Generate `variants` samples per (name, image, segments) source and write
        the manifest. Sample indices run source-major, so the i-th variant of
        source s is sample s * variants + i.
        """
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.records = []
        self.entries = []
        self.total_dropped = 0
        self.print_header(len(sources))

        size = self.config.output_size
        jobs = [
            (s, variant)
            for s in range(len(sources))
            for variant in range(self.config.variants)
        ]
        prepared = {}
        for s, variant in tqdm(jobs, desc="Samples", unit="sample", disable=not self.progress):
            name, image, segments = sources[s]
            if s not in prepared:
                prepared = {s: prepare_source(image, segments, size)}
            src, scaled = prepared[s]

            index = s * self.config.variants + variant
            sample = self.make_sample(src, scaled, index)
            if sample.dropped_polylines:
                warnings.warn(
                    f"Sample {index}: {sample.dropped_polylines} segment(s) left the fisheye raster",
                    RuntimeWarning,
                )
            self.total_dropped += sample.dropped_polylines

            record_path = self.write_sample(sample, index, name)
            self.records.append(record_path.name)
            self.entries.append(
                {"record": record_path.name, "seed": sample.seed, "params": sample.params.to_dict()}
            )

        manifest = {
            "config": self.config.to_dict(),
            "seed": self.seed,
            "split": self.split,
            "samples": list(self.records),
            "entries": list(self.entries),
        }
        write_json(self.out_dir / "manifest.json", manifest)
        self.print_footer()
        return manifest


def build_dataset(
    src_images: Sequence[PathLike],
    src_annotations: Sequence[PathLike],
    config: Optional[SamplerConfig],
    out_dir: PathLike,
    seed: int = DEFAULT_SEED,
    split: str = "train",
    progress: bool = True,
) -> Path:
    """
    Read paired perspective images and annotation files, generate the dataset
    into out_dir and return the manifest path.
    """
    if len(src_images) != len(src_annotations):
        raise InputError(
            out_dir,
            f"Got {len(src_images)} images but {len(src_annotations)} annotation files",
        )

    sources = []
    for image_path, annotation_path in zip(src_images, src_annotations):
        _, segments = parse_annotation_file(annotation_path)
        image = read_image(image_path)
        sources.append((os.path.basename(str(image_path)), image, segments))

    builder = DatasetBuilder(out_dir, config, seed=seed, split=split, progress=progress)
    builder.run(sources)
    return Path(out_dir) / "manifest.json"
