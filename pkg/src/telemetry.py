import logging
from pathlib import Path
from typing import Optional, Union

from opentelemetry import trace
from opentelemetry.sdk.resources import Resource
from opentelemetry.sdk.trace import TracerProvider
from opentelemetry.sdk.trace.export import BatchSpanProcessor, ConsoleSpanExporter
from prometheus_client import CollectorRegistry, Counter, Histogram, write_to_textfile

from .config import settings

# Configure logging
logging.basicConfig(level=getattr(logging, settings.LOG_LEVEL.upper()))
logger = logging.getLogger(__name__)


class TelemetryConfig:
    """OpenTelemetry tracing and Prometheus counters for the workbench"""

    def __init__(self):
        self.service_name = settings.OTEL_SERVICE_NAME
        self.service_version = settings.OTEL_SERVICE_VERSION
        self.otlp_endpoint = settings.OTLP_ENDPOINT
        self.enable_console_export = settings.OTEL_CONSOLE_EXPORT

        self.tracer = None
        self.registry = CollectorRegistry()
        self._create_custom_metrics()

    def setup_tracing(self):
        """Configure distributed tracing"""
        resource = Resource.create({
            "service.name": self.service_name,
            "service.version": self.service_version,
        })

        tracer_provider = TracerProvider(resource=resource)
        trace.set_tracer_provider(tracer_provider)

        if self.otlp_endpoint:
            try:
                from opentelemetry.exporter.otlp.proto.http.trace_exporter import OTLPSpanExporter

                otlp_exporter = OTLPSpanExporter(endpoint=self.otlp_endpoint, headers={})
                tracer_provider.add_span_processor(BatchSpanProcessor(otlp_exporter))
                logger.info(f"OTLP tracing configured: {self.otlp_endpoint}")
            except Exception as e:
                logger.warning(f"Failed to configure OTLP exporter: {e}")

        if self.enable_console_export:
            tracer_provider.add_span_processor(BatchSpanProcessor(ConsoleSpanExporter()))
            logger.info("Console tracing enabled")

        self.tracer = trace.get_tracer(__name__)
        return self.tracer

    def _create_custom_metrics(self):
        """Create the workbench counters on the package registry"""
        self.episodes_total = Counter(
            "episodes_total",
            "Episodes finished, by controller and outcome",
            ["method", "outcome"],
            registry=self.registry,
        )
        self.candidate_evaluations_total = Counter(
            "candidate_evaluations_total",
            "Single-step candidate controls scored by barrier-based controllers",
            ["method"],
            registry=self.registry,
        )
        self.smpc_leaf_evaluations_total = Counter(
            "smpc_leaf_evaluations_total",
            "Leaf states scored by sampling MPC",
            ["method"],
            registry=self.registry,
        )
        self.orca_faults_total = Counter(
            "orca_faults_total",
            "Degenerate ORCA neighbor pairs (coincident centers)",
            registry=self.registry,
        )
        self.training_iterations_total = Counter(
            "training_iterations_total",
            "Optimizer steps taken, by training phase",
            ["phase"],
            registry=self.registry,
        )
        self.decision_duration = Histogram(
            "decision_duration_seconds",
            "Wall time of one controller decision",
            ["method"],
            registry=self.registry,
        )

    def record_episode(self, method: str, outcome: str):
        self.episodes_total.labels(method=method, outcome=outcome).inc()

    def record_candidates(self, method: str, count: int):
        self.candidate_evaluations_total.labels(method=method).inc(count)

    def record_leaves(self, method: str, count: int):
        self.smpc_leaf_evaluations_total.labels(method=method).inc(count)

    def record_orca_fault(self, count: int = 1):
        self.orca_faults_total.inc(count)

    def record_training_iterations(self, phase: str, count: int = 1):
        self.training_iterations_total.labels(phase=phase).inc(count)

    def record_decision_duration(self, method: str, seconds: float):
        self.decision_duration.labels(method=method).observe(seconds)

    def write_metrics(self, out_dir: Union[str, Path]) -> Path:
        """Dump the registry in Prometheus textfile format"""
        path = Path(out_dir) / settings.METRICS_TEXTFILE
        path.parent.mkdir(parents=True, exist_ok=True)
        write_to_textfile(str(path), self.registry)
        logger.info(f"Metrics written to {path}")
        return path


# Global telemetry instance
telemetry = TelemetryConfig()


def init_telemetry():
    """Initialize tracing for a CLI run"""
    logger.info("Initializing OpenTelemetry...")
    telemetry.setup_tracing()
    logger.info("OpenTelemetry initialization complete")
    return telemetry


def get_tracer():
    """Get the application tracer"""
    return telemetry.tracer or trace.get_tracer(__name__)


def counter_value(name: str, labels: Optional[dict] = None) -> float:
    """Read a counter total back from the registry (0 when never incremented)"""
    value = telemetry.registry.get_sample_value(f"{name}_total" if not name.endswith("_total") else name, labels or {})
    return value or 0.0
