#!/usr/bin/env python3
"""
Streamlit UI for ember
"""
import streamlit as st

from main import EmberRunner, RunPlan
from machine_sim import INSTRUCTION_SETS, cross_evaluate, get_instruction_set
from optimizer import OptimizerParams, decode_genome, parse_targets
from workload import EmberError, WorkloadConfig, format_access_set, parse_access_set


# Page configuration
st.set_page_config(
    page_title="ember",
    page_icon="🔥",
    layout="wide",
    initial_sidebar_state="expanded"
)

# Custom CSS
st.markdown("""
<style>
    .main-header {
        font-size: 2.5rem;
        font-weight: bold;
        color: #d9480f;
        margin-bottom: 1rem;
    }
    .sub-header {
        font-size: 1.2rem;
        color: #666;
        margin-bottom: 2rem;
    }
</style>
""", unsafe_allow_html=True)


@st.cache_resource
def initialize_runner(config_path: str = "config.yaml", machine_path: str = ""):
    """Initialize the runner (cached)"""
    return EmberRunner(config_path, machine_config=machine_path or None)


def parse_workload_lines(text: str) -> dict:
    """'label = groups' lines, e.g. 'all = L1_LS:5,L2_L:2,L3_L:2,RAM_L:1'"""
    workloads = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        label, sep, groups = line.partition('=')
        if not sep:
            raise ValueError(f"expected 'label = groups', got '{line.strip()}'")
        workloads[label.strip()] = parse_access_set(groups.strip())
    return workloads


def main():
    # Header
    st.markdown('<div class="main-header">🔥 ember</div>', unsafe_allow_html=True)
    st.markdown('<div class="sub-header">Measure and tune power stress workloads on a machine model</div>',
                unsafe_allow_html=True)

    # Sidebar
    with st.sidebar:
        st.header("⚙️ Configuration")
        config_path = st.text_input("Config File", value="config.yaml")
        machine_path = st.text_input("Machine Config", value="", help="Empty: $EMBER_MACHINE_CONFIG or reference machine")

        try:
            runner = initialize_runner(config_path, machine_path)
            st.success("✓ System initialized")
        except EmberError as e:
            st.error(f"Error initializing system: {e}")
            st.stop()

        machine = runner.machine
        st.subheader("🖥️ Machine")
        st.info(f"{runner.machine_path or 'Reference machine'}")
        st.text(f"  Cores: {machine.cores}")
        st.text(f"  P-states: {', '.join(str(f) for f in machine.pstates_mhz)} MHz")
        st.text(f"  EDC limit: {machine.edc_limit_w:g} W")

        st.divider()
        st.subheader("🧮 Instruction Sets")
        for iset in INSTRUCTION_SETS.values():
            st.text(f"  • {iset.id} (u={iset.default_unroll})")

    run_defaults = runner.config['run']
    iset_ids = list(INSTRUCTION_SETS)
    pstate_labels = [f"{i}: {f} MHz" for i, f in enumerate(machine.pstates_mhz)]

    tab1, tab2, tab3 = st.tabs(["⚡ Measure", "🧬 Optimize", "📊 Cross-Evaluation"])

    with tab1:
        st.header("Measure a Workload")
        col1, col2 = st.columns(2)
        with col1:
            function = st.selectbox("Instruction Set", iset_ids,
                                    index=iset_ids.index(run_defaults['function'])
                                    if run_defaults['function'] in iset_ids else 0)
            groups = st.text_input("Memory Accesses", value=run_defaults['groups'])
            unroll = st.number_input("Unroll Factor (0 = default)", min_value=0, value=0, step=100)
        with col2:
            pstate = st.selectbox("P-state", range(len(pstate_labels)), format_func=lambda i: pstate_labels[i],
                                  key="measure_pstate")
            duration = st.number_input("Duration (s)", min_value=1, value=int(run_defaults['duration_s']))
            start_delta = st.number_input("Start Delta (ms)", min_value=0,
                                          value=int(runner.config['measurement']['start_delta_ms']))
            stop_delta = st.number_input("Stop Delta (ms)", min_value=0,
                                         value=int(runner.config['measurement']['stop_delta_ms']))

        if st.button("⚡ Run Measurement", type="primary"):
            try:
                plan = RunPlan(mode='measure', function=function, groups=groups, unroll=int(unroll) or None,
                               pstate=int(pstate), duration_s=duration, start_delta_ms=int(start_delta),
                               stop_delta_ms=int(stop_delta), progress=False)
                result, rows = runner.measure(plan)
            except EmberError as e:
                st.error(f"Error: {e}")
            else:
                m1, m2, m3 = st.columns(3)
                m1.metric("Power", f"{result.power_w:.2f} W")
                m2.metric("IPC", f"{result.ipc:.3f}")
                m3.metric("Frequency", f"{result.eff_freq_mhz} MHz")
                if result.throttled:
                    st.warning(f"⚠ Throttled from {result.requested_freq_mhz} MHz")
                st.text(f"Fetch tier: {result.fetch_tier.value}")
                st.table([row._asdict() for row in rows])

    with tab2:
        st.header("Tune the Access Mix")
        opt_defaults = runner.config['optimizer']
        col1, col2 = st.columns(2)
        with col1:
            targets_text = st.text_input("Targets", value=opt_defaults['targets'])
            individuals = st.number_input("Individuals", min_value=4, value=8, step=2)
            generations = st.number_input("Generations", min_value=1, value=3)
        with col2:
            mutation = st.number_input("Mutation Probability", min_value=0.0, max_value=1.0,
                                       value=float(opt_defaults['nsga2_m']))
            max_count = st.number_input("Max Count", min_value=1, value=5)
            seed = st.number_input("Seed", min_value=0, value=int(run_defaults['seed']))
            opt_pstate = st.selectbox("P-state", range(len(pstate_labels)), format_func=lambda i: pstate_labels[i],
                                      key="optimize_pstate")

        if st.button("🧬 Run Optimizer", type="primary"):
            try:
                params = OptimizerParams(population=int(individuals), generations=int(generations),
                                         mutation_prob=float(mutation), max_count=int(max_count),
                                         rng_seed=int(seed))
                plan = RunPlan(mode='optimize', function=run_defaults['function'], pstate=int(opt_pstate),
                               duration_s=run_defaults['duration_s'], preheat_s=0, params=params,
                               targets=targets_text, log_path='', progress=False)
                with st.spinner("Optimizing..."):
                    outcome = runner.run_optimize(plan)
            except EmberError as e:
                st.error(f"Error: {e}")
            else:
                targets = parse_targets(targets_text)
                st.success(f"✓ {outcome.evaluations} evaluations, {len(outcome.front)} on the final front")
                st.table([
                    {
                        'power_w': round(ind.objectives[0], 2),
                        'ipc': round(ind.objectives[1], 4) if len(ind.objectives) > 1 else None,
                        'accesses': format_access_set(decode_genome(ind.genome, targets)),
                    }
                    for ind in outcome.front
                ])

    with tab3:
        st.header("Cross-Evaluate Workloads")
        st.markdown("One workload per line as `label = accesses`; every workload runs at every P-state.")
        text = st.text_area(
            "Workloads",
            value="reg = REG:1\nall = L1_LS:5,L2_L:2,L3_L:2,RAM_L:1",
            height=120,
        )
        if st.button("📊 Cross-Evaluate"):
            try:
                iset = get_instruction_set(run_defaults['function'])
                workloads = {
                    label: WorkloadConfig(iset.id, iset.default_unroll, accesses)
                    for label, accesses in parse_workload_lines(text).items()
                }
                results = cross_evaluate(workloads, machine, iset)
            except (EmberError, ValueError) as e:
                st.error(f"Error: {e}")
            else:
                table = []
                for label in workloads:
                    row = {'workload': label}
                    for p, freq in enumerate(machine.pstates_mhz):
                        result = results[(label, p)]
                        row[f"{freq} MHz"] = f"{result.power_w:.2f} W @ {result.eff_freq_mhz}"
                    table.append(row)
                st.table(table)


if __name__ == "__main__":
    main()
