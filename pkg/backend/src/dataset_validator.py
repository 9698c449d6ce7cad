"""
Dataset Validation Script for ForegroundShield
Validates manifest records (images, masks, labels) and reports issues
"""

import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from datasetkit import DatasetManifest, ManifestRecord, read_image, read_manifest, read_mask


@dataclass
class ValidationResult:
    """Structure to hold validation results"""
    record_name: str
    issues: List[str]
    warnings: List[str]
    is_valid: bool


class ManifestValidator:
    """Validates manifest records for completeness and consistency"""

    def __init__(self, root: Path, require_masks: bool = False, expected_size: Optional[int] = None,
                 min_foreground: float = 0.01):
        self.root = Path(root)
        self.require_masks = require_masks
        self.expected_size = expected_size
        self.min_foreground = min_foreground

    def validate_image(self, record: ManifestRecord) -> Tuple[List[str], List[str], Optional[np.ndarray]]:
        issues, warnings = [], []
        try:
            image = read_image(self.root / record.image_path)
        except Exception as e:
            issues.append(f"Unreadable image: {e}")
            return issues, warnings, None

        h, w = image.shape[:2]
        if self.expected_size is not None and (h, w) != (self.expected_size, self.expected_size):
            issues.append(f"Image is {h}x{w}, expected {self.expected_size}x{self.expected_size}")
        elif h != w:
            warnings.append(f"Image is not square: {h}x{w}")
        if image.max() == image.min():
            warnings.append("Image is constant")
        return issues, warnings, image

    def validate_mask(self, record: ManifestRecord, image: Optional[np.ndarray]) -> Tuple[List[str], List[str]]:
        issues, warnings = [], []
        if not record.mask_path:
            if self.require_masks:
                issues.append("Missing mask")
            return issues, warnings

        try:
            mask = read_mask(self.root / record.mask_path)
        except Exception as e:
            issues.append(f"Unreadable mask: {e}")
            return issues, warnings

        if not mask.any():
            issues.append("Mask is empty")
        elif mask.mean() < self.min_foreground:
            warnings.append(f"Foreground covers only {mask.mean():.1%} of the image")
        if image is not None and mask.shape != image.shape[:2]:
            issues.append(f"Mask is {mask.shape[0]}x{mask.shape[1]}, image is {image.shape[0]}x{image.shape[1]}")
        return issues, warnings

    def validate_record(self, record: ManifestRecord, num_labels: int) -> ValidationResult:
        """Validate a single record"""
        all_issues, all_warnings = [], []

        if not 0 <= record.label < num_labels:
            all_issues.append(f"Label {record.label} outside [0, {num_labels})")

        issues, warnings, image = self.validate_image(record)
        all_issues.extend(issues)
        all_warnings.extend(warnings)

        issues, warnings = self.validate_mask(record, image)
        all_issues.extend(issues)
        all_warnings.extend(warnings)

        return ValidationResult(
            record_name=record.image_path,
            issues=all_issues,
            warnings=all_warnings,
            is_valid=not all_issues,
        )

    def validate_manifest(self, manifest: DatasetManifest) -> Dict:
        results = [self.validate_record(r, len(manifest.label_names)) for r in manifest.records]
        valid_count = sum(1 for r in results if r.is_valid)
        counts = np.bincount([r.label for r in manifest.records], minlength=len(manifest.label_names))
        return {
            'success': True,
            'total_records': len(results),
            'valid_records': valid_count,
            'invalid_records': len(results) - valid_count,
            'class_counts': {name: int(c) for name, c in zip(manifest.label_names, counts)},
            'results': results,
        }

    def validate_manifest_file(self, manifest_path: Path) -> Dict:
        """Validate an entire manifest file"""
        try:
            manifest = read_manifest(manifest_path)
        except Exception as e:
            logging.error(f"Failed to load manifest {manifest_path}: {e}")
            return {'success': False, 'error': f"Failed to load manifest: {e}", 'results': []}
        return self.validate_manifest(manifest)

    def print_validation_report(self, validation_data: Dict, out=None):
        """Print a formatted validation report"""
        out = out or sys.stdout

        def say(text: str = ""):
            print(text, file=out)

        if not validation_data['success']:
            say(f"❌ Validation failed: {validation_data['error']}")
            return

        total = validation_data['total_records']
        valid = validation_data['valid_records']
        invalid = validation_data['invalid_records']

        say("=" * 60)
        say("🖼️  DATASET VALIDATION REPORT")
        say("=" * 60)
        say(f"📊 Total records: {total}")
        say(f"✅ Valid records: {valid}")
        say(f"❌ Invalid records: {invalid}")
        if total:
            say(f"📈 Success rate: {(valid / total * 100):.1f}%")
        for name, count in validation_data['class_counts'].items():
            say(f"   {name}: {count}")
        say()

        if invalid > 0:
            say("🚨 ISSUES FOUND:")
            say("-" * 40)
            for result in validation_data['results']:
                if not result.is_valid:
                    say(f"\n❌ {result.record_name}:")
                    for issue in result.issues:
                        say(f"   • {issue}")

        warning_count = sum(len(r.warnings) for r in validation_data['results'])
        if warning_count > 0:
            say(f"\n⚠️  WARNINGS ({warning_count} total):")
            say("-" * 40)
            for result in validation_data['results']:
                if result.warnings:
                    say(f"\n⚠️  {result.record_name}:")
                    for warning in result.warnings:
                        say(f"   • {warning}")

        say("\n" + "=" * 60)
        if invalid == 0 and warning_count == 0:
            say("🎉 All records passed validation with no issues!")
        elif invalid == 0:
            say("✅ All records are valid (some warnings to review)")
        else:
            say(f"🔧 {invalid} records need attention")


def passed(validation_data: Dict) -> bool:
    return validation_data['success'] and validation_data['invalid_records'] == 0
