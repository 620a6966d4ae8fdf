from apps.harness.config import parse_value
from apps.harness.management.base import LabCommand, take_option
from apps.harness.services.sweep_service import SWEEP_PARAMS, sweep_service
from apps.netcore.exceptions import ConfigurationError


class Command(LabCommand):
    help = "Repeats the experiment for each value of one parameter and writes sweep.csv."

    def add_arguments(self, parser):
        parser.add_argument("--param", choices=sorted(SWEEP_PARAMS))
        parser.add_argument("--values", help="Comma separated values, e.g. 0.75,0.9,0.95")
        super().add_arguments(parser)

    def run(self, **options):
        tokens = list(options["overrides"])
        # options after the config path land in the override tokens
        param = take_option(tokens, "param") or options["param"]
        raw_values = take_option(tokens, "values") or options["values"]
        if not param or not raw_values:
            raise ConfigurationError("sweep needs --param and --values.")

        config = self.load(options["config"], tokens)
        values = [parse_value(v.strip()) for v in raw_values.split(",") if v.strip()]
        rows = sweep_service.sweep(config, param, values)

        for row in rows:
            if row["error"]:
                self.stdout.write(self.style.WARNING(f"{param}={row['value']}: {row['error']}"))
            else:
                self.stdout.write(
                    f"{param}={row['value']}  {row['mode']}  "
                    f"overall_acc={row['overall_acc_mean']:.4f}"
                )
        self.stdout.write(self.style.SUCCESS(f"Sweep written to {config.output_dir / 'sweep.csv'}"))
