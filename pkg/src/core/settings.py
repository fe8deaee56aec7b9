import yaml
from pathlib import Path
import os


class Settings:
    def __init__(self, config_path=None):
        # Find project root by looking for config directory
        current_dir = Path(__file__).parent
        project_root = current_dir.parent.parent  # Go up from src/core to project root
        self.project_root = project_root

        # Try different possible locations for config
        config_paths = [
            project_root / "config" / "settings.yaml",
            Path("config/settings.yaml"),  # Relative from current working directory
        ]
        if config_path:
            config_paths.insert(0, Path(config_path))

        resolved = None
        for path in config_paths:
            if path.exists():
                resolved = path
                break

        if not resolved:
            raise FileNotFoundError(f"Could not find config/settings.yaml in any of: {config_paths}")

        with open(resolved, 'r') as f:
            self.config = yaml.safe_load(f)
        self.config_path = resolved

    @property
    def library_name(self):
        return self.config['library']['name']

    @property
    def library_version(self):
        return self.config['library']['version']

    @property
    def logging_config_path(self):
        return self.project_root / self.config['logging']['config_path']

    @property
    def log_directory(self):
        return Path(self.config['logging']['directory'])

    @property
    def converge_tol(self):
        return float(self.config['tolerances']['converge_tol'])

    @property
    def truncation_tol(self):
        return float(self.config['tolerances']['truncation_tol'])

    @property
    def steps_per_horizon(self):
        return int(self.config['tolerances']['steps_per_horizon'])

    @property
    def assignment_cap(self):
        return int(self.config['transport']['assignment_cap'])

    @property
    def assignment_auto_max(self):
        return int(self.config['transport']['assignment_auto_max'])

    @property
    def ot_subsample(self):
        return int(self.config['transport']['ot_subsample'])

    @property
    def ot_every(self):
        return int(self.config['transport']['ot_every'])

    @property
    def sinkhorn(self):
        return dict(self.config['transport']['sinkhorn'])

    @property
    def threads(self):
        """Worker threads: STOCHESP_THREADS wins over the YAML default."""
        env_value = os.environ.get('STOCHESP_THREADS')
        if env_value:
            try:
                return max(1, int(env_value))
            except ValueError:
                pass
        return int(self.config['parallel']['threads'])

    @property
    def path_chunk(self):
        return int(self.config['parallel']['path_chunk'])

    @property
    def cost_block(self):
        return int(self.config['parallel']['cost_block'])

    @property
    def certificate_defaults(self):
        return dict(self.config['certificates'])


settings = Settings()
