"""
File I/O for model tables, checkpoints, JSON documents and CSV reports
"""

import json
import os
import tempfile
from pathlib import Path
from typing import List

import pandas as pd

from core.exceptions import CheckpointMissingError, ConfigurationError
from core.soft_mdp import ValueTable
from core.tabular_lm import TabularLM
from core.training import Checkpoint

MANIFEST_NAME = 'manifest.json'
DRAFT_NAME = 'draft.json'
TRAINING_LOG_NAME = 'training_log.csv'


class IOHandler:
    """Load and save KDLab artefacts"""

    # -- JSON documents --------------------------------------------------------

    def read_json_document(self, file_path):
        """
        Parse a JSON document

        Raises:
            ConfigurationError: With ``path:line:col`` on syntax errors
            FileNotFoundError: If the file does not exist
        """
        file_path = Path(file_path)
        text = file_path.read_text()
        try:
            return json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"{file_path}:{e.lineno}:{e.colno}: {e.msg}") from e

    def write_json_document(self, document, file_path):
        """Write ``document`` byte-stably (sorted keys, two-space indent)"""
        text = json.dumps(document, sort_keys=True, indent=2) + '\n'
        self._atomic_write(Path(file_path), text)

    # -- models ----------------------------------------------------------------

    def save_model(self, model: TabularLM, file_path):
        self.write_json_document(model.to_dict(), file_path)

    def load_model(self, file_path) -> TabularLM:
        return TabularLM.from_dict(self.read_json_document(file_path))

    def save_value_table(self, value: ValueTable, file_path):
        self.write_json_document(value.to_dict(), file_path)

    def load_value_table(self, file_path) -> ValueTable:
        return ValueTable.from_dict(self.read_json_document(file_path))

    # -- checkpoints -----------------------------------------------------------

    def save_checkpoints(self, checkpoints: List[Checkpoint], directory, selected_batch=None,
                         flagged=False, draft: TabularLM = None):
        """
        Write every checkpoint, the optional draft model and the manifest

        The manifest is written last so a directory with a manifest is complete.
        """
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        entries = []
        for checkpoint in checkpoints:
            name = f'checkpoint_{checkpoint.batch}.json'
            self.write_json_document(checkpoint.to_dict(), directory / name)
            entries.append({
                'batch': checkpoint.batch,
                'file': name,
                'lambdas': {str(k): v for k, v in checkpoint.lambdas.items()},
                'measured_use': {str(k): v for k, v in checkpoint.measured_use.items()},
            })
        if draft is not None:
            self.save_model(draft, directory / DRAFT_NAME)
        manifest = {
            'checkpoints': entries,
            'selected_batch': selected_batch,
            'selection_flagged': bool(flagged),
            'draft': DRAFT_NAME if draft is not None else None,
        }
        self.write_json_document(manifest, directory / MANIFEST_NAME)

    def read_manifest(self, directory):
        manifest_path = Path(directory) / MANIFEST_NAME
        if not manifest_path.exists():
            raise CheckpointMissingError(manifest_path)
        return self.read_json_document(manifest_path)

    def load_checkpoint(self, directory, batch=None) -> Checkpoint:
        """The manifest's selected checkpoint, or the one for ``batch``"""
        manifest = self.read_manifest(directory)
        if batch is None:
            batch = manifest.get('selected_batch')
        if batch is None:
            batch = manifest['checkpoints'][-1]['batch']
        for entry in manifest['checkpoints']:
            if entry['batch'] == batch:
                path = Path(directory) / entry['file']
                if not path.exists():
                    raise CheckpointMissingError(path)
                return Checkpoint.from_dict(self.read_json_document(path))
        raise CheckpointMissingError(Path(directory) / f'checkpoint_{batch}.json')

    def load_checkpoints(self, directory) -> List[Checkpoint]:
        manifest = self.read_manifest(directory)
        return [self.load_checkpoint(directory, entry['batch']) for entry in manifest['checkpoints']]

    def load_draft(self, directory) -> TabularLM:
        manifest = self.read_manifest(directory)
        path = Path(directory) / (manifest.get('draft') or DRAFT_NAME)
        if not path.exists():
            raise CheckpointMissingError(path)
        return self.load_model(path)

    # -- tabular reports -------------------------------------------------------

    def export_results(self, results, file_path):
        """
        Export rows (list of dicts or a DataFrame) to CSV atomically

        Args:
            results: Rows to write
            file_path: Output CSV path
        """
        df = results if isinstance(results, pd.DataFrame) else pd.DataFrame(results)
        self._atomic_write(Path(file_path), df.to_csv(index=False))

    def load_results(self, file_path) -> pd.DataFrame:
        return pd.read_csv(file_path)

    def _atomic_write(self, file_path: Path, text):
        file_path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=file_path.parent, prefix=f'.{file_path.name}.', suffix='.tmp')
        try:
            with os.fdopen(fd, 'w', newline='') as f:
                f.write(text)
            os.replace(tmp, file_path)
        except BaseException:
            if os.path.exists(tmp):
                os.remove(tmp)
            raise
