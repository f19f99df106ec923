from idchain.scenario.report import (
    AuditReport,
    ChainStatus,
    PrivacyScan,
    UserTrace,
    audit_report,
    audit_report_from_dir,
)
from idchain.scenario.runner import (
    EXIT_EXPECTATION,
    EXIT_OK,
    EXIT_PARSE,
    RunResult,
    ScenarioRunner,
    StepOutcome,
    run_scenario,
)
from idchain.scenario.schema import (
    STEP_KINDS,
    ScenarioFile,
    ScenarioStep,
    load_scenario,
    parse_scenario,
)
